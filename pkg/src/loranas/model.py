"""Small frozen pre-norm transformer that hosts LoRA attachments.

Every projection is stored as an (in, out) matrix and applied as ``x @ W``.
Projections listed in ``ModelConfig.targets`` may carry a
:class:`~loranas.supernet.SuperLoraModule` or a
:class:`~loranas.supernet.LoraAdapter`; everything else stays frozen.

Optional patch inputs are linearly embedded and prepended to the text as a
prefix that every position can attend to.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .rng import stream
from .supernet import LoraAdapter, RankSearchSpace, SuperLoraModule, merge_adapter
from .tensor import Tensor

GROUPS = ("Q", "K", "V", "O", "G", "U", "D")
# vision-tower MLP names map onto the gated MLP projections here
GROUP_ALIASES = {"FC1": "U", "FC2": "D"}
CHECKPOINT_VERSION = 1


def normalize_groups(groups) -> tuple[str, ...]:
    if isinstance(groups, str):
        groups = [g for g in groups.replace(" ", "").split(",") if g]
    out = []
    for g in groups:
        g = GROUP_ALIASES.get(g.upper(), g.upper())
        if g not in GROUPS:
            raise ValueError(f"unknown target module {g!r}; choose from {', '.join(GROUPS)}, FC1, FC2")
        if g not in out:
            out.append(g)
    return tuple(sorted(out, key=GROUPS.index))


@dataclass
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_mlp: int = 128
    max_seq_len: int = 64
    patch_count: int = 0
    patch_dim: int = 0
    targets: tuple[str, ...] = GROUPS
    seed: int = 0

    def __post_init__(self):
        self.targets = normalize_groups(self.targets)
        for f in ("vocab_size", "d_model", "n_layers", "n_heads", "d_mlp", "max_seq_len"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if (self.patch_count > 0) != (self.patch_dim > 0):
            raise ValueError("patch_count and patch_dim must both be set or both be zero")
        if not self.targets:
            raise ValueError("target module set is empty")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["targets"] = list(self.targets)
        return d

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Batch:
    """Inputs, next-token targets and loss mask, each (batch, seq)."""

    tokens: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    patches: np.ndarray | None = None
    ids: tuple[int, ...] = field(default_factory=tuple)

    @property
    def size(self) -> int:
        return self.tokens.shape[0]


class FrozenTransformer:
    def __init__(self, config: ModelConfig):
        self.config = c = config
        rng = stream(c.seed, "model-init")
        d, f = c.d_model, c.d_mlp
        self.weights: dict[str, Tensor] = {}

        def w(name, shape, std):
            self.weights[name] = Tensor(rng.normal(0.0, std, shape), name=name)

        w("tok_emb", (c.vocab_size, d), 1.0)
        w("pos_emb", (c.max_seq_len, d), 1.0)
        if c.patch_count:
            w("patch_proj", (c.patch_dim, d), 1.0 / math.sqrt(c.patch_dim))
            w("patch_pos", (c.patch_count, d), 1.0)
        out_std = 1.0 / math.sqrt(2 * c.n_layers)
        for i in range(c.n_layers):
            p = f"layers.{i}."
            for g in "QKV":
                w(p + g, (d, d), 1.0 / math.sqrt(d))
            w(p + "O", (d, d), out_std / math.sqrt(d))
            w(p + "G", (d, f), 1.0 / math.sqrt(d))
            w(p + "U", (d, f), 1.0 / math.sqrt(d))
            w(p + "D", (f, d), out_std / math.sqrt(f))
            for ln in ("ln1", "ln2"):
                self.weights[p + ln + ".g"] = Tensor(np.ones(d), name=p + ln + ".g")
                self.weights[p + ln + ".b"] = Tensor(np.zeros(d), name=p + ln + ".b")
        self.weights["ln_f.g"] = Tensor(np.ones(d), name="ln_f.g")
        self.weights["ln_f.b"] = Tensor(np.zeros(d), name="ln_f.b")
        w("head", (d, c.vocab_size), 2.0 / math.sqrt(d))
        self.attachments: dict[str, SuperLoraModule | LoraAdapter] = {}

    # -- adapter management -------------------------------------------------

    def adapter_names(self) -> list[str]:
        return [f"layers.{i}.{g}" for i in range(self.config.n_layers) for g in self.config.targets]

    def attach_supernet(self, space: RankSearchSpace, seed: int, lora_alpha=None) -> None:
        for name in self.adapter_names():
            self.attachments[name] = SuperLoraModule(
                self.weights[name], space, stream(seed, "adapter-init", name), lora_alpha=lora_alpha, name=name
            )

    def attach_lora(self, ranks: dict[str, int], seed: int, scaling: float = 1.0) -> None:
        for name in self.adapter_names():
            din, dout = self.weights[name].shape
            self.attachments[name] = LoraAdapter.init(
                din, dout, ranks[name], stream(seed, "adapter-init", name), scaling, name
            )

    def detach_adapters(self) -> None:
        self.attachments = {}

    def merged(self) -> "FrozenTransformer":
        """Copy of this model with every fixed-rank adapter folded into its base weight."""
        out = FrozenTransformer.__new__(FrozenTransformer)
        out.config = self.config
        out.weights = dict(self.weights)
        out.attachments = {}
        for name, att in self.attachments.items():
            if not isinstance(att, LoraAdapter):
                raise TypeError(f"{name}: only fixed-rank adapters can be merged; extract one first")
            out.weights[name] = merge_adapter(self.weights[name], att)
        return out

    def frozen_parameters(self) -> list[Tensor]:
        return list(self.weights.values())

    def lora_parameters(self) -> list[Tensor]:
        out = []
        for name in sorted(self.attachments):
            att = self.attachments[name]
            out.extend([att.W_A, att.W_B])
        return out

    def alpha_parameters(self) -> list[Tensor]:
        return [
            self.attachments[n].alphas
            for n in sorted(self.attachments)
            if isinstance(self.attachments[n], SuperLoraModule)
        ]

    def supernet_modules(self) -> dict[str, SuperLoraModule]:
        return {n: a for n, a in self.attachments.items() if isinstance(a, SuperLoraModule)}

    def adapter_param_count(self) -> int:
        return int(np.sum([a.n_params() for a in self.attachments.values()])) if self.attachments else 0

    # -- forward ------------------------------------------------------------

    def linear(self, name: str, x: Tensor) -> Tensor:
        att = self.attachments.get(name)
        if att is None:
            return T.matmul(x, self.weights[name])
        return att.forward(x, self.weights[name])

    def attention_forward(self, x: Tensor, layer: int, *, batch: int = 1, prefix: int = 0,
                          prefix_visible: bool = True) -> Tensor:
        seq = x.shape[0] // batch
        if seq > self.config.max_seq_len:
            raise ValueError(f"sequence length {seq} exceeds max_seq_len={self.config.max_seq_len}")
        p = f"layers.{layer}."
        q = self.linear(p + "Q", x)
        k = self.linear(p + "K", x)
        v = self.linear(p + "V", x)
        a = T.attention(q, k, v, batch=batch, seq=seq, heads=self.config.n_heads,
                        prefix=prefix, prefix_visible=prefix_visible)
        return self.linear(p + "O", a)

    def mlp_forward(self, x: Tensor, layer: int) -> Tensor:
        p = f"layers.{layer}."
        gate = T.silu(self.linear(p + "G", x))
        return self.linear(p + "D", T.mul(gate, self.linear(p + "U", x)))

    def forward(self, tokens, patches=None, *, prefix_visible: bool = True) -> Tensor:
        """Logits for every text position, rows ordered (sequence, position)."""
        c = self.config
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        B, Tn = tokens.shape
        if tokens.size and (tokens.min() < 0 or tokens.max() >= c.vocab_size):
            raise IndexError(f"token id outside vocabulary [0, {c.vocab_size})")
        P = 0 if patches is None else np.asarray(patches).shape[1]
        S = P + Tn
        if S > c.max_seq_len:
            raise ValueError(f"sequence length {S} exceeds max_seq_len={c.max_seq_len}")
        W = self.weights
        h = T.add(T.take_rows(W["tok_emb"], tokens.reshape(-1)),
                  T.take_rows(W["pos_emb"], np.tile(np.arange(Tn), B)))
        text_rows = None
        if P:
            if not c.patch_count or P > c.patch_count:
                raise ValueError(f"model accepts at most {c.patch_count} patches, got {P}")
            pa = np.asarray(patches, dtype=np.float64).reshape(B * P, c.patch_dim)
            hp = T.add(T.matmul(Tensor(pa), W["patch_proj"]),
                       T.take_rows(W["patch_pos"], np.tile(np.arange(P), B)))
            # interleave so each sequence is [its patches, its text]
            b = np.arange(B)[:, None]
            order = np.concatenate([b * P + np.arange(P), B * P + b * Tn + np.arange(Tn)], axis=1)
            h = T.take_rows(T.concat_rows([hp, h]), order.reshape(-1))
            text_rows = (b * S + P + np.arange(Tn)).reshape(-1)
        for i in range(c.n_layers):
            p = f"layers.{i}."
            a = T.layer_norm(h, W[p + "ln1.g"], W[p + "ln1.b"])
            h = T.add(h, self.attention_forward(a, i, batch=B, prefix=P, prefix_visible=prefix_visible))
            m = T.layer_norm(h, W[p + "ln2.g"], W[p + "ln2.b"])
            h = T.add(h, self.mlp_forward(m, i))
        h = T.layer_norm(h, W["ln_f.g"], W["ln_f.b"])
        if text_rows is not None:
            h = T.take_rows(h, text_rows)
        return T.matmul(h, W["head"])

    model_forward = forward

    def loss(self, batch: Batch) -> Tensor:
        logits = self.forward(batch.tokens, batch.patches)
        return T.cross_entropy_loss(logits, batch.targets.reshape(-1), batch.mask.reshape(-1))


def eval_perplexity(model: FrozenTransformer, examples, batch_size: int = 64) -> float:
    """exp of the mean per-token cross-entropy over all masked positions."""
    from .data import collate

    examples = list(examples)
    if not examples:
        raise ValueError("cannot evaluate perplexity on an empty split")
    total = 0.0
    count = 0.0
    with T.no_grad():
        for i in range(0, len(examples), batch_size):
            b = collate(examples[i : i + batch_size])
            w = b.mask.reshape(-1).astype(np.float64)
            total += model.loss(b).item() * w.sum()
            count += w.sum()
    return float(math.exp(total / count))


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(path, model: FrozenTransformer, extra: dict | None = None, arrays: dict | None = None) -> None:
    """Write config, frozen weights and attachments to a single ``.npz`` file.

    Layout: ``frozen/<name>`` for base tensors, ``adapter/<name>/{W_A,W_B,alphas}``
    for attachments, ``extra/<key>`` for caller arrays, and ``__meta__`` holding
    a JSON header with ``version``, ``config``, per-attachment kind/space/scaling
    and the caller's ``extra`` document.
    """
    from .report import atomic_write_bytes
    import io

    meta = {"version": CHECKPOINT_VERSION, "config": model.config.to_dict(), "attachments": {}, "extra": extra or {}}
    out = {}
    for name, t in model.weights.items():
        out[f"frozen/{name}"] = t.data
    for name, att in model.attachments.items():
        out[f"adapter/{name}/W_A"] = att.W_A.data
        out[f"adapter/{name}/W_B"] = att.W_B.data
        if isinstance(att, SuperLoraModule):
            out[f"adapter/{name}/alphas"] = att.alphas.data
            meta["attachments"][name] = {"kind": "supernet", "space": list(att.space.ranks), "scaling": att.scaling}
        else:
            meta["attachments"][name] = {"kind": "lora", "rank": att.rank, "scaling": att.scaling}
    for k, v in (arrays or {}).items():
        out[f"extra/{k}"] = np.asarray(v)
    out["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    buf = io.BytesIO()
    np.savez(buf, **out)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path) -> tuple[FrozenTransformer, dict, dict]:
    """Inverse of :func:`save_checkpoint`; returns (model, extra, arrays)."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        data = {k: z[k] for k in z.files}
    model = FrozenTransformer(ModelConfig.from_dict(meta["config"]))
    for name in model.weights:
        model.weights[name] = Tensor(data[f"frozen/{name}"], name=name)
    for name, info in meta["attachments"].items():
        wa = Tensor(data[f"adapter/{name}/W_A"], requires_grad=True)
        wb = Tensor(data[f"adapter/{name}/W_B"], requires_grad=True)
        if info["kind"] == "supernet":
            mod = SuperLoraModule(model.weights[name], RankSearchSpace(info["space"]), name=name)
            mod.scaling = info["scaling"]
            mod.W_A, mod.W_B = wa, wb
            mod.alphas = Tensor(data[f"adapter/{name}/alphas"], requires_grad=True)
            model.attachments[name] = mod
        else:
            model.attachments[name] = LoraAdapter(wa, wb, info["scaling"], name)
    arrays = {k[len("extra/"):]: v for k, v in data.items() if k.startswith("extra/")}
    return model, meta["extra"], arrays
