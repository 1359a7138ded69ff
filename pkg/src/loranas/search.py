"""Alternating bi-level rank search followed by fixed-rank fine-tuning.

Per mini-batch the engine takes one step on the LoRA factors using a train
batch with the alphas frozen, then one step on the alphas using a validation
batch with the factors frozen (first-order: no unrolled inner step).  After
the search epochs every module keeps the rank with the largest alpha.
"""

from __future__ import annotations

import contextlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .data import batch_iter
from .model import GROUPS, FrozenTransformer, eval_perplexity, load_checkpoint, normalize_groups, save_checkpoint
from .optim import Optimizer, make_optimizer
from .rng import stream
from .supernet import LoraAdapter, RankMap, RankSearchSpace, extract_adapter, sample_rank

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, phase: str, step: int, batch_ids, value: float):
        self.phase, self.step, self.batch_ids, self.value = phase, step, tuple(batch_ids), value
        super().__init__(f"non-finite {phase} loss {value!r} at step {step} (batch examples {list(batch_ids)[:8]}...)")


@dataclass
class SearchConfig:
    search_epochs: int = 3
    finetune_epochs: int = 7
    batch_size: int = 16
    lr_weights: float = 1e-3
    lr_alpha: float = 3e-3
    weight_optimizer: str = "adam"
    alpha_optimizer: str = "sgd"
    clip_norm: float | None = None
    seed: int = 0
    reinit_after_search: bool = False
    space: tuple[int, ...] = (4, 8, 16)
    targets: tuple[str, ...] = GROUPS
    lora_alpha: float | None = None
    eval_batch_size: int = 64

    def __post_init__(self):
        self.space = tuple(int(r) for r in self.space)
        self.targets = normalize_groups(self.targets)
        RankSearchSpace(self.space)
        if self.search_epochs < 1:
            raise ValueError("search_epochs must be at least 1")
        if self.finetune_epochs < 0:
            raise ValueError("finetune_epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.lr_weights < 0 or self.lr_alpha < 0:
            raise ValueError("learning rates must be non-negative")

    @property
    def search_space(self) -> RankSearchSpace:
        return RankSearchSpace(self.space)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["space"] = list(self.space)
        d["targets"] = list(self.targets)
        return d

    @classmethod
    def from_dict(cls, d) -> "SearchConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class EpochRecord:
    phase: str
    epoch: int
    train_loss: float
    val_loss: float
    eval_perplexity: float
    wall_seconds: float
    trainable_params: int


@dataclass
class SearchState:
    step: int = 0
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    finetune_losses: list[float] = field(default_factory=list)
    alpha_history: dict[str, list[list[float]]] = field(default_factory=dict)
    epochs: list[EpochRecord] = field(default_factory=list)
    val_cursor: int = 0
    search_epochs_done: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epochs"] = [asdict(e) for e in self.epochs]
        return d

    @classmethod
    def from_dict(cls, d) -> "SearchState":
        d = dict(d)
        d["epochs"] = [EpochRecord(**e) for e in d.get("epochs", [])]
        return cls(**d)


@contextlib.contextmanager
def _frozen(params):
    params = list(params)
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
        p.grad = None
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def _step(model, batch, trainable: Optimizer, frozen, phase: str, step: int) -> float:
    with _frozen(frozen):
        trainable.zero_grad()
        loss = model.loss(batch)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(phase, step, batch.ids, value)
        T.backward(loss)
        trainable.step()
        trainable.zero_grad()
    return value


def weight_step(model, batch, config: SearchConfig, opt: Optimizer | None = None, step: int = 0) -> float:
    """One descent step on the LoRA factors with every alpha frozen; returns the train loss."""
    if opt is None:
        opt = make_optimizer(config.weight_optimizer, model.lora_parameters(), config.lr_weights, config.clip_norm)
    return _step(model, batch, opt, model.alpha_parameters(), "train", step)


def alpha_step(model, batch, config: SearchConfig, opt: Optimizer | None = None, step: int = 0) -> float:
    """One descent step on the alphas with the LoRA factors frozen; returns the validation loss."""
    if opt is None:
        opt = make_optimizer(config.alpha_optimizer, model.alpha_parameters(), config.lr_alpha, config.clip_norm)
    return _step(model, batch, opt, model.lora_parameters(), "val", step)


def _subseed(seed: int, name: str) -> int:
    return int(stream(seed, name).integers(0, 2**62))


def _mean(xs) -> float:
    return float(np.mean(xs)) if len(xs) else float("nan")


class SearchEngine:
    """Holds the model, optimizers and state for one search run."""

    def __init__(self, model: FrozenTransformer, datasets, config: SearchConfig, state: SearchState | None = None,
                 checkpoint_path=None):
        self.model = model
        self.train, self.val, self.eval = datasets[0], datasets[1], datasets[2]
        self.config = config
        self.state = state or SearchState()
        self.checkpoint_path = checkpoint_path
        if not model.supernet_modules():
            model.attach_supernet(config.search_space, config.seed, config.lora_alpha)
        self.w_opt = make_optimizer(config.weight_optimizer, model.lora_parameters(), config.lr_weights, config.clip_norm)
        self.a_opt = make_optimizer(config.alpha_optimizer, model.alpha_parameters(), config.lr_alpha, config.clip_norm)
        self._val_batches: list = []
        self._val_epoch = -1

    def _next_val_batch(self):
        nb = math.ceil(len(self.val) / self.config.batch_size)
        cycle, pos = divmod(self.state.val_cursor, nb)
        if cycle != self._val_epoch:
            self._val_batches = batch_iter(self.val, self.config.batch_size, _subseed(self.config.seed, "val-batching"), cycle)
            self._val_epoch = cycle
        self.state.val_cursor += 1
        return self._val_batches[pos]

    def trainable_params(self) -> int:
        return self.model.adapter_param_count() + int(sum(a.data.size for a in self.model.alpha_parameters()))

    def run_epoch(self, epoch: int) -> EpochRecord:
        t0 = time.perf_counter()
        st = self.state
        tl, vl = [], []
        train_seed = _subseed(self.config.seed, "search-batching")
        for batch in batch_iter(self.train, self.config.batch_size, train_seed, epoch):
            tl.append(weight_step(self.model, batch, self.config, self.w_opt, st.step))
            vl.append(alpha_step(self.model, self._next_val_batch(), self.config, self.a_opt, st.step))
            st.train_losses.append(tl[-1])
            st.val_losses.append(vl[-1])
            st.step += 1
        for name, mod in sorted(self.model.supernet_modules().items()):
            st.alpha_history.setdefault(name, []).append(mod.probabilities().data.tolist())
        ppl = eval_perplexity(self.model, self.eval, self.config.eval_batch_size)
        rec = EpochRecord("search", epoch, _mean(tl), _mean(vl), ppl, time.perf_counter() - t0, self.trainable_params())
        st.epochs.append(rec)
        st.search_epochs_done = epoch + 1
        log.info("search epoch %d: train %.4f val %.4f ppl %.4f", epoch, rec.train_loss, rec.val_loss, ppl)
        return rec

    def rank_map(self) -> RankMap:
        mods = self.model.supernet_modules()
        return RankMap(
            {n: sample_rank(m) for n, m in sorted(mods.items())},
            {n: m.space.ranks for n, m in sorted(mods.items())},
            {n: m.probabilities().data.tolist() for n, m in sorted(mods.items())},
        )

    def save(self, path) -> None:
        arrays = {f"wopt/{k}": v for k, v in self.w_opt.state_arrays().items()}
        arrays.update({f"aopt/{k}": v for k, v in self.a_opt.state_arrays().items()})
        extra = {"search_state": self.state.to_dict(), "search_config": self.config.to_dict()}
        save_checkpoint(path, self.model, extra, arrays)

    def run(self) -> tuple[RankMap, SearchState]:
        for epoch in range(self.state.search_epochs_done, self.config.search_epochs):
            try:
                self.run_epoch(epoch)
            except NonFiniteLossError:
                if self.checkpoint_path:
                    self.save(self.checkpoint_path)
                raise
            if self.checkpoint_path:
                self.save(self.checkpoint_path)
        return self.rank_map(), self.state

    @classmethod
    def resume(cls, path, datasets, checkpoint_path=None) -> "SearchEngine":
        model, extra, arrays = load_checkpoint(path)
        config = SearchConfig.from_dict(extra["search_config"])
        eng = cls(model, datasets, config, SearchState.from_dict(extra["search_state"]), checkpoint_path)
        eng.w_opt.load_state_arrays({k[5:]: v for k, v in arrays.items() if k.startswith("wopt/")})
        eng.a_opt.load_state_arrays({k[5:]: v for k, v in arrays.items() if k.startswith("aopt/")})
        return eng


def run_search(model, datasets, config: SearchConfig, checkpoint_path=None) -> tuple[RankMap, SearchState]:
    return SearchEngine(model, datasets, config, checkpoint_path=checkpoint_path).run()


def install_adapters(model: FrozenTransformer, rank_map: RankMap, config: SearchConfig) -> None:
    """Replace supernet attachments with fixed-rank adapters (or add fresh ones)."""
    supers = model.supernet_modules()
    names = model.adapter_names()
    missing = [n for n in names if n not in rank_map.ranks]
    if missing:
        raise ValueError(f"rank map lacks modules: {', '.join(missing)}")
    if not supers:
        if model.attachments:
            raise ValueError("model already carries fixed-rank adapters")
        model.attach_lora({n: rank_map[n] for n in names}, config.seed)
        return
    for name in names:
        mod = supers[name]
        r = rank_map[name]
        if r not in mod.space:
            raise ValueError(f"{name}: rank {r} not in its search space {list(mod.space.ranks)}")
        if config.reinit_after_search:
            din, dout = mod.base_W.shape
            model.attachments[name] = LoraAdapter.init(din, dout, r, stream(config.seed, "adapter-init", name),
                                                       mod.scaling, name)
        else:
            model.attachments[name] = extract_adapter(mod, r)


@dataclass
class FinetuneResult:
    perplexity: float
    state: SearchState
    adapter_params: int


def run_finetune(model, rank_map: RankMap, datasets, config: SearchConfig,
                 state: SearchState | None = None) -> FinetuneResult:
    """Install fixed-rank adapters per ``rank_map`` and train them on the train split."""
    train, _, ev = datasets[0], datasets[1], datasets[2]
    state = state or SearchState()
    install_adapters(model, rank_map, config)
    opt = make_optimizer(config.weight_optimizer, model.lora_parameters(), config.lr_weights, config.clip_norm)
    seed = _subseed(config.seed, "finetune-batching")
    step = 0
    for epoch in range(config.finetune_epochs):
        t0 = time.perf_counter()
        tl = []
        for batch in batch_iter(train, config.batch_size, seed, epoch):
            tl.append(_step(model, batch, opt, [], "train", step))
            state.finetune_losses.append(tl[-1])
            step += 1
        ppl = eval_perplexity(model, ev, config.eval_batch_size)
        state.epochs.append(EpochRecord("finetune", epoch, _mean(tl), float("nan"), ppl,
                                        time.perf_counter() - t0, model.adapter_param_count()))
        log.info("finetune epoch %d: train %.4f ppl %.4f", epoch, _mean(tl), ppl)
    ppl = eval_perplexity(model, ev, config.eval_batch_size)
    return FinetuneResult(ppl, state, model.adapter_param_count())


def run_baseline(model, rank: int, datasets, config: SearchConfig) -> FinetuneResult:
    """Plain uniform-rank LoRA fine-tuning with the same schedule as :func:`run_finetune`."""
    return run_finetune(model, RankMap.uniform(model.adapter_names(), rank), datasets, config)
