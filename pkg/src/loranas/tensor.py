"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op builds its output from numpy arrays and records a closure that maps
the output gradient to one gradient per operand.  ``backward`` walks the
recorded graph once in reverse topological order and then releases it; a
second ``backward`` through the same graph raises :class:`TapeStateError`.

Broadcasting is limited to scalar scaling, row-vector addition, and the
explicit row/column scaling ops used to build superweights.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .kernels import K, attention_mask


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeStateError(RuntimeError):
    """Backward requested through a graph that was already consumed."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(s <= 0 for s in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op: str | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._consumed = False
    out._op = op
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = grad_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _need_2d(x: Tensor, op: str) -> None:
    if x.data.ndim != 2:
        raise DimensionError(f"{op}: expected a matrix, got shape {x.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_rowvec(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` of shape (n,) added to every row of an (m, n) matrix."""
    _need_2d(x, "add_rowvec")
    if b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise DimensionError(f"add_rowvec: bias {b.shape} does not match columns of {x.shape}")
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), "add_rowvec")


def scale_cols(x: Tensor, c: Tensor) -> Tensor:
    """Multiply column j of an (m, n) matrix by ``c[j]``; ``c`` has shape (n,)."""
    _need_2d(x, "scale_cols")
    if c.data.ndim != 1 or c.shape[0] != x.shape[1]:
        raise DimensionError(f"scale_cols: scale {c.shape} does not match columns of {x.shape}")
    xd, cd = x.data, c.data
    return _make(xd * cd, (x, c), lambda g: (g * cd, (g * xd).sum(axis=0)), "scale_cols")


def scale_rows(x: Tensor, c: Tensor) -> Tensor:
    """Multiply row i of an (m, n) matrix by ``c[i]``; ``c`` has shape (m,)."""
    _need_2d(x, "scale_rows")
    if c.data.ndim != 1 or c.shape[0] != x.shape[0]:
        raise DimensionError(f"scale_rows: scale {c.shape} does not match rows of {x.shape}")
    xd, cd = x.data, c.data
    return _make(
        xd * cd[:, None], (x, c), lambda g: (g * cd[:, None], (g * xd).sum(axis=1)), "scale_rows"
    )


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    return _make(xd * sig, (x,), lambda g: (g * sig * (1.0 + xd * (1.0 - sig)),), "silu")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _make(np.array([x.data.sum()]), (x,), lambda g: (np.full(shape, g[0]),), "sum")


# ---------------------------------------------------------------------------
# shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need_2d(a, "matmul")
    _need_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _make(ad @ bd, (a, b), grad_fn, "matmul")


def transpose(x: Tensor) -> Tensor:
    _need_2d(x, "transpose")
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def slice_cols(x: Tensor, start: int, end: int) -> Tensor:
    _need_2d(x, "slice_cols")
    m, n = x.shape
    if not 0 <= start < end <= n:
        raise IndexError(f"slice_cols: window [{start}, {end}) out of range for {n} columns")

    def grad_fn(g):
        out = np.zeros((m, n))
        out[:, start:end] = g
        return (out,)

    return _make(x.data[:, start:end].copy(), (x,), grad_fn, "slice_cols")


def slice_rows(x: Tensor, start: int, end: int) -> Tensor:
    _need_2d(x, "slice_rows")
    m, n = x.shape
    if not 0 <= start < end <= m:
        raise IndexError(f"slice_rows: window [{start}, {end}) out of range for {m} rows")

    def grad_fn(g):
        out = np.zeros((m, n))
        out[start:end] = g
        return (out,)

    return _make(x.data[start:end].copy(), (x,), grad_fn, "slice_rows")


def take_rows(x: Tensor, idx) -> Tensor:
    """Gather rows ``x[idx]``; the backward pass scatter-adds into repeated rows."""
    _need_2d(x, "take_rows")
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"take_rows: index out of range for {x.shape[0]} rows")
    shape = x.shape

    def grad_fn(g):
        return (K.scatter_add_rows(np.zeros(shape), idx, np.ascontiguousarray(g)),)

    return _make(x.data[idx], (x,), grad_fn, "take_rows")


embedding = take_rows


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: column counts differ: {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def grad_fn(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), grad_fn, "concat_rows")


# ---------------------------------------------------------------------------
# normalisation, attention, losses


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed after subtracting the row maximum."""
    if x.shape[-1] < 1:
        raise DimensionError("softmax_rows: empty last dimension")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), grad_fn, "softmax_rows")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    _need_2d(x, "layer_norm")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs width {d}")
    y, xhat, rstd = K.layernorm_fwd(x.data, gain.data, bias.data, eps)

    def grad_fn(g):
        dx, dg, db = K.layernorm_bwd(np.ascontiguousarray(g), xhat, rstd, gain.data)
        return dx, dg, db

    return _make(y, (x, gain, bias), grad_fn, "layer_norm")


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    *,
    batch: int,
    seq: int,
    heads: int,
    prefix: int = 0,
    prefix_visible: bool = True,
) -> Tensor:
    """Multi-head scaled dot-product attention over ``batch`` stacked sequences.

    ``q``, ``k`` and ``v`` are (batch*seq, d) with each sequence's rows
    contiguous.  Text rows are causal; the first ``prefix`` rows of every
    sequence are visible to all queries (see :func:`kernels.attention_mask`).
    """
    for t in (q, k, v):
        _need_2d(t, "attention")
    if not (q.shape == k.shape == v.shape):
        raise DimensionError(f"attention: q/k/v shapes {q.shape}, {k.shape}, {v.shape} differ")
    if q.shape[0] != batch * seq or q.shape[1] % heads:
        raise DimensionError(f"attention: {q.shape} incompatible with batch={batch}, seq={seq}, heads={heads}")
    mask = attention_mask(seq, prefix, prefix_visible)
    qd, kd, vd = (np.ascontiguousarray(t.data) for t in (q, k, v))
    out, probs = K.attention_fwd(qd, kd, vd, mask, batch, seq, heads)

    def grad_fn(g):
        return K.attention_bwd(np.ascontiguousarray(g), qd, kd, vd, probs, batch, seq, heads)

    return _make(out, (q, k, v), grad_fn, "attention")


def cross_entropy_loss(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-softmax of ``logits``.

    ``weights`` (0/1 loss mask or non-negative weights) restricts the mean to
    selected rows; rows with weight 0 receive exactly zero gradient.
    """
    _need_2d(logits, "cross_entropy_loss")
    b, v = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != b:
        raise DimensionError(f"cross_entropy_loss: {targets.shape[0]} targets for {b} rows")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"cross_entropy_loss: target outside vocabulary [0, {v})")
    w = np.ones(b) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != b:
        raise DimensionError(f"cross_entropy_loss: {w.shape[0]} weights for {b} rows")
    if not w.sum() > 0:
        raise ValueError("cross_entropy_loss: loss mask selects no rows")
    ld = np.ascontiguousarray(logits.data)
    loss = K.xent_fwd(ld, targets, w)

    def grad_fn(g):
        return (K.xent_bwd(ld, targets, w, float(g[0])),)

    return _make(np.array([loss]), (logits,), grad_fn, "cross_entropy")


# ---------------------------------------------------------------------------
# backward


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every differentiable tensor reachable from ``loss``.

    Leaf gradients accumulate into an existing ``.grad``; optimizers reset
    them.  The graph is released afterwards.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeStateError("backward already ran through this graph")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    for node in order:
        if node._consumed:
            raise TapeStateError("graph contains a tensor whose tape was already consumed")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in order:
        if not node.is_leaf:
            node._consumed = True
            node._parents = ()
            node._backward = None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences of ``f`` at ``x``.

    The relative error per coordinate is ``|num - g| / max(|g|, 1e-8)``.
    ``x.data`` is perturbed in place and restored.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        x.requires_grad = was
        raise DimensionError(f"finite_diff_check: f must return a scalar, got {out.shape}")
    backward(out)
    g = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(x).item()
            flat[i] = orig - eps
            lo = f(x).item()
            flat[i] = orig
            num = (hi - lo) / (2 * eps)
            err = abs(num - gflat[i]) / max(abs(gflat[i]), 1e-8)
            worst = max(worst, err)
    x.requires_grad = was
    return worst
