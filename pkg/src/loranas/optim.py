"""Plain SGD, momentum SGD and Adam over lists of tensors."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class Optimizer:
    def __init__(self, params: list[Tensor], lr: float, clip_norm: float | None = None):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.params = list(params)
        self.lr = float(lr)
        self.clip_norm = clip_norm
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _grads(self) -> list[np.ndarray]:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        if self.clip_norm:
            norm = math.sqrt(float(np.sum([np.sum(g * g) for g in grads])))
            if norm > self.clip_norm:
                grads = [g * (self.clip_norm / norm) for g in grads]
        return grads

    def step(self) -> None:
        self.t += 1
        for i, (p, g) in enumerate(zip(self.params, self._grads())):
            self._update(i, p, g)

    def _update(self, i: int, p: Tensor, g: np.ndarray) -> None:
        raise NotImplementedError

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"t": np.array([self.t])}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["t"][0])


class SGD(Optimizer):
    def _update(self, i, p, g):
        if self.lr:
            p.data -= self.lr * g


class Momentum(Optimizer):
    def __init__(self, params, lr, beta: float = 0.9, clip_norm=None):
        super().__init__(params, lr, clip_norm)
        self.beta = beta
        self.v = [np.zeros_like(p.data) for p in self.params]

    def _update(self, i, p, g):
        self.v[i] = self.beta * self.v[i] + g
        if self.lr:
            p.data -= self.lr * self.v[i]

    def state_arrays(self):
        out = super().state_arrays()
        out.update({f"v{i}": v for i, v in enumerate(self.v)})
        return out

    def load_state_arrays(self, arrays):
        super().load_state_arrays(arrays)
        self.v = [arrays[f"v{i}"].copy() for i in range(len(self.params))]


class Adam(Optimizer):
    def __init__(self, params, lr, betas=(0.9, 0.999), eps: float = 1e-8, clip_norm=None):
        super().__init__(params, lr, clip_norm)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def _update(self, i, p, g):
        self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
        self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
        if not self.lr:
            return
        mhat = self.m[i] / (1 - self.b1**self.t)
        vhat = self.v[i] / (1 - self.b2**self.t)
        p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self):
        out = super().state_arrays()
        out.update({f"m{i}": m for i, m in enumerate(self.m)})
        out.update({f"v{i}": v for i, v in enumerate(self.v)})
        return out

    def load_state_arrays(self, arrays):
        super().load_state_arrays(arrays)
        self.m = [arrays[f"m{i}"].copy() for i in range(len(self.params))]
        self.v = [arrays[f"v{i}"].copy() for i in range(len(self.params))]


OPTIMIZERS = {"sgd": SGD, "momentum": Momentum, "adam": Adam}


def make_optimizer(kind: str, params, lr: float, clip_norm=None) -> Optimizer:
    try:
        cls = OPTIMIZERS[kind]
    except KeyError:
        raise ValueError(f"unknown optimizer {kind!r}; choose from {', '.join(OPTIMIZERS)}") from None
    return cls(params, lr, clip_norm=clip_norm)
