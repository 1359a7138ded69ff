"""Deterministic synthetic tasks and batching.

Token layout shared by every task::

    0 PAD   1 BOS   2 SEP   3 QRY   4.. symbols

An :class:`Example` stores the full token sequence and a per-token answer
mask.  Training shifts by one: inputs are ``tokens[:-1]``, targets are
``tokens[1:]`` and the loss mask is ``answer[1:]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Batch
from .rng import stream

PAD, BOS, SEP, QRY = 0, 1, 2, 3
SYMBOL_BASE = 4
TASKS = ("copy", "modsum", "patchcount")


@dataclass(frozen=True)
class Example:
    tokens: tuple[int, ...]
    answer: tuple[bool, ...]
    patches: np.ndarray | None = None

    def key(self) -> tuple:
        p = None if self.patches is None else self.patches.tobytes()
        return (self.tokens, p)


@dataclass
class Dataset:
    examples: list[Example]
    split: str
    seed: int

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]


def copy_example(symbols) -> Example:
    """``BOS s1..sn SEP s1..sn``; only the echoed symbols are answers."""
    symbols = [int(s) for s in symbols]
    toks = [BOS, *symbols, SEP, *symbols]
    ans = [False] * (len(symbols) + 2) + [True] * len(symbols)
    return Example(tuple(toks), tuple(ans))


def modsum_example(digits, k: int) -> Example:
    """``BOS d1..dn SEP y1..yn`` with ``y_i`` the running sum of digits mod ``k``."""
    digits = [int(x) for x in digits]
    ys = list(np.cumsum(digits) % k)
    toks = [BOS, *(SYMBOL_BASE + x for x in digits), SEP, *(SYMBOL_BASE + int(y) for y in ys)]
    ans = [False] * (len(digits) + 2) + [True] * len(ys)
    return Example(tuple(toks), tuple(ans))


def patch_features(grid: np.ndarray) -> np.ndarray:
    """Per cell: (set, unset, row fraction, column fraction)."""
    g = np.asarray(grid, dtype=np.float64)
    rows, cols = g.shape
    r, c = np.meshgrid(np.arange(rows) / rows, np.arange(cols) / cols, indexing="ij")
    return np.stack([g, 1.0 - g, r, c], axis=-1).reshape(rows * cols, 4)


def patchcount_example(grid) -> Example:
    """Patches encode the grid; text is ``BOS QRY answer`` with answer = count of set cells."""
    grid = np.asarray(grid)
    count = int(grid.sum())
    return Example((BOS, QRY, SYMBOL_BASE + count), (False, False, True), patch_features(grid))


def _generate(kind: str, size: int, rng, *, length: int, modulus: int, alphabet: int, grid: int):
    seen = set()
    out = []
    attempts = 0
    while len(out) < size:
        attempts += 1
        if attempts > 50 * size:
            raise ValueError(f"cannot draw {size} distinct {kind} examples; enlarge length or alphabet")
        if kind == "copy":
            ex = copy_example(SYMBOL_BASE + rng.integers(0, alphabet, length))
        elif kind == "modsum":
            ex = modsum_example(rng.integers(0, modulus, length), modulus)
        else:
            ex = patchcount_example(rng.integers(0, 2, (grid, grid)))
        # distinct examples keep the splits disjoint
        if ex.key() in seen:
            continue
        seen.add(ex.key())
        out.append(ex)
    return out


def split_train_val(examples, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Shuffle deterministically and cut into contiguous train/val/eval parts."""
    examples = list(examples)
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(examples)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_eval = n - n_train - n_val
    if min(n_train, n_val, n_eval) <= 0:
        raise ValueError(f"ratios {ratios} leave an empty split for {n} examples")
    perm = stream(seed, "split").permutation(n)
    shuffled = [examples[i] for i in perm]
    return (
        Dataset(shuffled[:n_train], "train", seed),
        Dataset(shuffled[n_train : n_train + n_val], "val", seed),
        Dataset(shuffled[n_train + n_val :], "eval", seed),
    )


def gen_task(kind: str, size: int, seed: int, *, length: int = 8, modulus: int = 2,
             alphabet: int = 16, grid: int = 3, ratios=(0.8, 0.1, 0.1)):
    """Generate ``size`` distinct examples of ``kind`` and split them."""
    if kind not in TASKS:
        raise ValueError(f"unknown task {kind!r}; choose from {', '.join(TASKS)}")
    if size < 30:
        raise ValueError("size must be at least 30 so every split is non-empty")
    examples = _generate(kind, size, stream(seed, "data", kind), length=length,
                         modulus=modulus, alphabet=alphabet, grid=grid)
    return split_train_val(examples, ratios, seed)


def task_vocab_needed(kind: str, *, length: int = 8, modulus: int = 2, alphabet: int = 16, grid: int = 3) -> int:
    if kind == "copy":
        return SYMBOL_BASE + alphabet
    if kind == "modsum":
        return SYMBOL_BASE + modulus
    return SYMBOL_BASE + grid * grid + 1


def load_corpus(path, seed: int = 0, ratios=(0.8, 0.1, 0.1)):
    """Read newline-delimited token-id sequences; every position after the first is a target."""
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                toks = tuple(int(t) for t in line.replace(",", " ").split())
            except ValueError:
                raise ValueError(f"{path}:{lineno}: expected whitespace-separated integers") from None
            if len(toks) < 2 or min(toks) < 0:
                raise ValueError(f"{path}:{lineno}: need at least two non-negative token ids")
            examples.append(Example(toks, (False,) + (True,) * (len(toks) - 1)))
    return split_train_val(examples, ratios, seed)


def collate(examples) -> Batch:
    """Stack examples into a right-padded batch; padding is masked out."""
    examples = list(examples)
    n = max(len(e.tokens) for e in examples) - 1
    B = len(examples)
    tokens = np.full((B, n), PAD, dtype=np.int64)
    targets = np.full((B, n), PAD, dtype=np.int64)
    mask = np.zeros((B, n), dtype=np.float64)
    for i, e in enumerate(examples):
        t = np.asarray(e.tokens)
        m = len(t) - 1
        tokens[i, :m] = t[:-1]
        targets[i, :m] = t[1:]
        mask[i, :m] = np.asarray(e.answer[1:], dtype=np.float64)
    patches = None
    if examples[0].patches is not None:
        patches = np.stack([e.patches for e in examples])
    return Batch(tokens, targets, mask, patches)


def batch_iter(split, batch_size: int, seed: int, epoch: int):
    """Batches of a permutation fixed by (seed, epoch); the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    examples = list(split)
    perm = stream(seed, "batching", epoch).permutation(len(examples))
    out = []
    for i in range(0, len(perm), batch_size):
        idx = perm[i : i + batch_size]
        b = collate(examples[j] for j in idx)
        b.ids = tuple(int(j) for j in idx)
        out.append(b)
    return out
