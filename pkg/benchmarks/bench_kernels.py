"""Time the numba kernels against the pure-numpy fallbacks.

Usage::

    python benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Shapes match a search step on the default toy model (batch 16, sequence 13,
width 64, 4 heads, vocabulary 64).  A final row times one full supernet
training step with each backend by re-importing the package in a child
process with ``LORANAS_NUMBA`` set.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from loranas.kernels import attention_mask, numba_kernels, numpy_kernels

STEP_SNIPPET = """
import timeit
from loranas.data import batch_iter, gen_task
from loranas.model import FrozenTransformer, ModelConfig
from loranas.search import SearchConfig, weight_step
from loranas.supernet import RankSearchSpace
m = FrozenTransformer(ModelConfig())
m.attach_supernet(RankSearchSpace([4, 8, 16]), 0)
b = batch_iter(gen_task("copy", 200, 0, length=6)[0], 16, 0, 0)[0]
c = SearchConfig()
weight_step(m, b, c)
print(min(timeit.repeat(lambda: weight_step(m, b, c), number=5, repeat={repeat})) / 5)
"""


def cases(rng, batch=16, seq=13, d=64, heads=4, vocab=64):
    n = batch * seq
    q, k, v, dout = (rng.normal(size=(n, d)) for _ in range(4))
    mask = attention_mask(seq)
    x = rng.normal(size=(n, d))
    gain, bias = rng.normal(size=d), rng.normal(size=d)
    logits = rng.normal(size=(n, vocab))
    targets = rng.integers(0, vocab, n)
    weights = (rng.random(n) < 0.5).astype(np.float64)
    idx = rng.integers(0, vocab, n)

    def run(K):
        out, probs = K.attention_fwd(q, k, v, mask, batch, seq, heads)
        y, xhat, rstd = K.layernorm_fwd(x, gain, bias, 1e-5)
        return {
            "attention_fwd": lambda: K.attention_fwd(q, k, v, mask, batch, seq, heads),
            "attention_bwd": lambda: K.attention_bwd(dout, q, k, v, probs, batch, seq, heads),
            "layernorm_fwd": lambda: K.layernorm_fwd(x, gain, bias, 1e-5),
            "layernorm_bwd": lambda: K.layernorm_bwd(dout, xhat, rstd, gain),
            "xent_fwd": lambda: K.xent_fwd(logits, targets, weights),
            "xent_bwd": lambda: K.xent_bwd(logits, targets, weights, 1.0),
            "scatter_add_rows": lambda: K.scatter_add_rows(np.zeros((vocab, d)), idx, x),
        }

    return run


def time_call(fn, repeat):
    fn()  # compile / warm caches
    number = 20
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def step_time(backend, repeat):
    env = dict(os.environ, LORANAS_NUMBA="1" if backend == "numba" else "0")
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(repeat=repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json", help="also write results as JSON")
    args = p.parse_args(argv)
    if numba_kernels is None:
        sys.exit("numba is not importable; nothing to compare")
    run = cases(np.random.default_rng(0))
    np_calls, nb_calls = run(numpy_kernels), run(numba_kernels)
    rows = []
    for name in np_calls:
        t_np = time_call(np_calls[name], args.repeat)
        t_nb = time_call(nb_calls[name], args.repeat)
        rows.append({"kernel": name, "numpy_us": t_np * 1e6, "numba_us": t_nb * 1e6, "speedup": t_np / t_nb})
    t_np = step_time("numpy", args.repeat)
    t_nb = step_time("numba", args.repeat)
    rows.append({"kernel": "search weight_step", "numpy_us": t_np * 1e6, "numba_us": t_nb * 1e6,
                 "speedup": t_np / t_nb})
    print(f"{'kernel':<20} {'numpy us':>12} {'numba us':>12} {'speedup':>8}")
    for r in rows:
        print(f"{r['kernel']:<20} {r['numpy_us']:>12.1f} {r['numba_us']:>12.1f} {r['speedup']:>7.2f}x")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
