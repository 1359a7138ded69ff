"""LoRA adapters and the weight-sharing rank supernet.

A :class:`SuperLoraModule` owns one pair of maximal-rank factors.  Each
candidate rank ``r`` reads the centered window ``[(r_max - r)/2, (r_max + r)/2)``
of the rank axis, and the superweights are the probability-weighted sum of
those windows.  Because windows are nested, that sum is a per-index scale:
index ``j`` is multiplied by the total probability of all windows covering
it, which is how the superweights are computed here.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

log = logging.getLogger(__name__)


def slice_window(r_max: int, r: int) -> tuple[int, int]:
    """Centered ``[start, end)`` window of width ``r`` inside ``r_max``."""
    if r < 1 or r > r_max:
        raise ValueError(f"rank {r} must lie in [1, {r_max}]")
    if (r_max - r) % 2:
        raise ValueError(
            f"rank {r} is not centerable inside {r_max}: r_max - r must be even; "
            "use a search space whose ranks differ from the maximum by even offsets"
        )
    return (r_max - r) // 2, (r_max + r) // 2


class RankSearchSpace:
    """Strictly ascending candidate ranks; the last one is the supernet rank."""

    def __init__(self, ranks):
        ranks = [int(r) for r in ranks]
        if not ranks:
            raise ValueError("search space needs at least one rank")
        if any(r < 1 for r in ranks):
            raise ValueError(f"ranks must be positive: {ranks}")
        if any(b <= a for a, b in zip(ranks, ranks[1:])):
            raise ValueError(f"ranks must be strictly ascending: {ranks}")
        self.ranks: tuple[int, ...] = tuple(ranks)
        self.r_max = ranks[-1]
        self.windows = tuple(slice_window(self.r_max, r) for r in ranks)
        if len(ranks) == 1:
            log.warning("singleton search space %s degenerates to plain LoRA", ranks)

    def __len__(self) -> int:
        return len(self.ranks)

    def __iter__(self):
        return iter(self.ranks)

    def __contains__(self, r) -> bool:
        return r in self.ranks

    def __eq__(self, other) -> bool:
        return isinstance(other, RankSearchSpace) and self.ranks == other.ranks

    def __repr__(self) -> str:
        return f"RankSearchSpace({list(self.ranks)})"

    def index(self, r: int) -> int:
        try:
            return self.ranks.index(r)
        except ValueError:
            raise ValueError(f"rank {r} not in search space {list(self.ranks)}") from None

    def window_matrix(self) -> np.ndarray:
        """(len(ranks), r_max) 0/1 matrix; row i marks the window of rank i."""
        m = np.zeros((len(self.ranks), self.r_max))
        for i, (a, b) in enumerate(self.windows):
            m[i, a:b] = 1.0
        return m

    @classmethod
    def parse(cls, text: str) -> "RankSearchSpace":
        return cls(int(t) for t in str(text).replace(" ", "").split(",") if t)


def softmax_alphas(alphas: Tensor) -> Tensor:
    if not np.all(np.isfinite(alphas.data)):
        raise FloatingPointError(f"architectural weights must be finite: {alphas.data}")
    return T.softmax_rows(alphas)


@dataclass
class LoraAdapter:
    """Fixed-rank adapter: the update is ``scaling * x @ W_A @ W_B``."""

    W_A: Tensor
    W_B: Tensor
    scaling: float = 1.0
    name: str = ""

    def __post_init__(self):
        if self.W_A.shape[1] != self.W_B.shape[0]:
            raise DimensionError(f"W_A {self.W_A.shape} and W_B {self.W_B.shape} disagree on rank")
        if self.scaling <= 0:
            raise ValueError("scaling must be positive")

    @property
    def rank(self) -> int:
        return self.W_A.shape[1]

    @property
    def in_dim(self) -> int:
        return self.W_A.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W_B.shape[1]

    @classmethod
    def init(cls, in_dim, out_dim, rank, rng, scaling=1.0, name="") -> "LoraAdapter":
        W_A = Tensor(rng.normal(0.0, 1.0 / math.sqrt(in_dim), (in_dim, rank)), requires_grad=True)
        W_B = Tensor(np.zeros((rank, out_dim)), requires_grad=True)
        return cls(W_A, W_B, scaling, name)

    def delta(self, x: Tensor) -> Tensor:
        return T.scale(T.matmul(T.matmul(x, self.W_A), self.W_B), self.scaling)

    def forward(self, x: Tensor, base_W: Tensor) -> Tensor:
        return T.add(T.matmul(x, base_W), self.delta(x))

    def parameters(self) -> list[Tensor]:
        return [self.W_A, self.W_B]

    def n_params(self) -> int:
        return self.rank * (self.in_dim + self.out_dim)


class SuperLoraModule:
    """Maximal-rank LoRA factors plus one alpha per candidate rank.

    A single alpha vector drives both factors so the two sides always agree
    on the selected rank.
    """

    def __init__(self, base_W: Tensor, space: RankSearchSpace, rng=None, *, lora_alpha=None, name=""):
        if base_W.data.ndim != 2:
            raise DimensionError(f"base weight must be a matrix, got {base_W.shape}")
        in_dim, out_dim = base_W.shape
        self.base_W = base_W
        self.space = space
        self.name = name
        lora_alpha = space.r_max if lora_alpha is None else lora_alpha
        self.scaling = float(lora_alpha) / space.r_max
        rng = np.random.default_rng(0) if rng is None else rng
        r = space.r_max
        self.W_A = Tensor(rng.normal(0.0, 1.0 / math.sqrt(in_dim), (in_dim, r)), requires_grad=True)
        self.W_B = Tensor(np.zeros((r, out_dim)), requires_grad=True)
        self.alphas = Tensor(np.zeros(len(space)), requires_grad=True)
        self._mask = space.window_matrix()

    @property
    def in_dim(self) -> int:
        return self.base_W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.base_W.shape[1]

    def probabilities(self) -> Tensor:
        return softmax_alphas(self.alphas)

    def index_scale(self) -> Tensor:
        """Per rank-index scale: total probability of windows covering each index."""
        p = T.reshape(self.probabilities(), (1, len(self.space)))
        return T.reshape(T.matmul(p, Tensor(self._mask)), (self.space.r_max,))

    def superweights(self) -> tuple[Tensor, Tensor]:
        c = self.index_scale()
        return T.scale_cols(self.W_A, c), T.scale_rows(self.W_B, c)

    def delta(self, x: Tensor) -> Tensor:
        wa, wb = self.superweights()
        return T.scale(T.matmul(T.matmul(x, wa), wb), self.scaling)

    def forward(self, x: Tensor, base_W: Tensor | None = None) -> Tensor:
        base_W = self.base_W if base_W is None else base_W
        if x.data.ndim != 2 or x.shape[1] != base_W.shape[0]:
            raise DimensionError(f"input {x.shape} does not match base weight {base_W.shape}")
        return T.add(T.matmul(x, base_W), self.delta(x))

    def lora_parameters(self) -> list[Tensor]:
        return [self.W_A, self.W_B]

    def alpha_parameters(self) -> list[Tensor]:
        return [self.alphas]

    def n_params(self) -> int:
        return self.space.r_max * (self.in_dim + self.out_dim)


def superweight_A(module: SuperLoraModule) -> Tensor:
    return module.superweights()[0]


def superweight_B(module: SuperLoraModule) -> Tensor:
    return module.superweights()[1]


def supernet_forward(x: Tensor, module: SuperLoraModule) -> Tensor:
    return module.forward(x)


def sample_rank(module: SuperLoraModule) -> int:
    """Rank with the largest alpha; ties go to the smallest rank."""
    a = module.alphas.data
    return module.space.ranks[int(np.flatnonzero(a == a.max())[0])]


def extract_adapter(module: SuperLoraModule, rank: int) -> LoraAdapter:
    """Windowed copy of the supernet factors at ``rank`` (warm start)."""
    if rank not in module.space:
        raise ValueError(f"rank {rank} not in search space {list(module.space.ranks)}")
    a, b = slice_window(module.space.r_max, rank)
    return LoraAdapter(
        Tensor(module.W_A.data[:, a:b].copy(), requires_grad=True),
        Tensor(module.W_B.data[a:b].copy(), requires_grad=True),
        module.scaling,
        module.name,
    )


def merge_adapter(base_W: Tensor, adapter: LoraAdapter) -> Tensor:
    if base_W.shape != (adapter.in_dim, adapter.out_dim):
        raise DimensionError(
            f"adapter {adapter.in_dim}x{adapter.out_dim} does not match base weight {base_W.shape}"
        )
    return Tensor(base_W.data + adapter.scaling * (adapter.W_A.data @ adapter.W_B.data))


@dataclass
class RankMap:
    """Chosen rank per adapted module, with the space and final probabilities."""

    ranks: dict[str, int] = field(default_factory=dict)
    spaces: dict[str, tuple[int, ...]] = field(default_factory=dict)
    probabilities: dict[str, list[float]] = field(default_factory=dict)

    def __post_init__(self):
        for name, r in self.ranks.items():
            space = self.spaces.get(name)
            if space is not None and r not in space:
                raise ValueError(f"{name}: rank {r} not in its search space {list(space)}")

    def __getitem__(self, name: str) -> int:
        return self.ranks[name]

    def __len__(self) -> int:
        return len(self.ranks)

    def items(self):
        return self.ranks.items()

    @classmethod
    def uniform(cls, names, rank: int, space=None) -> "RankMap":
        space = tuple(space) if space is not None else (rank,)
        return cls({n: rank for n in names}, {n: space for n in names})

    def to_dict(self) -> dict:
        out = {}
        for name in sorted(self.ranks):
            entry = {"rank": int(self.ranks[name])}
            if name in self.probabilities:
                entry["alphas"] = [float(p) for p in self.probabilities[name]]
            if name in self.spaces:
                entry["search_space"] = [int(r) for r in self.spaces[name]]
            out[name] = entry
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: Mapping) -> "RankMap":
        ranks, spaces, probs = {}, {}, {}
        for name, entry in doc.items():
            ranks[name] = int(entry["rank"])
            if "search_space" in entry:
                spaces[name] = tuple(int(r) for r in entry["search_space"])
            if "alphas" in entry:
                probs[name] = [float(p) for p in entry["alphas"]]
        return cls(ranks, spaces, probs)

    @classmethod
    def loads(cls, text: str) -> "RankMap":
        return cls.from_dict(json.loads(text))
