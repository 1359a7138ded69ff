"""Hot numeric kernels with a numba path and a pure-numpy path.

The numba path is used when numba imports and ``LORANAS_NUMBA`` is not set
to ``0``.  Both paths are always importable as ``numpy_kernels`` and
``numba_kernels`` (the latter is ``None`` without numba) so tests and the
benchmark can compare them directly.
"""

from __future__ import annotations

import math
import os
from types import SimpleNamespace

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def attention_mask(seq_len: int, prefix: int = 0, prefix_visible: bool = True) -> np.ndarray:
    """Boolean (S, S) mask; ``mask[i, j]`` is True when query i may attend key j.

    Text positions are causal.  Prefix positions (the first ``prefix`` rows)
    are visible to every query when ``prefix_visible``; otherwise text queries
    cannot see them at all, which is used as an ablation.
    """
    i = np.arange(seq_len)[:, None]
    j = np.arange(seq_len)[None, :]
    mask = j <= i
    if prefix:
        if prefix_visible:
            mask |= j < prefix
        else:
            mask &= ~((j < prefix) & (i >= prefix))
    return mask


# ---------------------------------------------------------------------------
# numpy implementations


def _np_attention_fwd(q, k, v, mask, batch, seq, heads):
    d = q.shape[1]
    dk = d // heads
    scale = 1.0 / math.sqrt(dk)

    def split(x):
        return x.reshape(batch, seq, heads, dk).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q), split(k), split(v)
    scores = np.matmul(qh, kh.transpose(0, 1, 3, 2)) * scale
    scores = np.where(mask, scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    out = np.matmul(probs, vh)
    return out.transpose(0, 2, 1, 3).reshape(batch * seq, d), probs


def _np_attention_bwd(dout, q, k, v, probs, batch, seq, heads):
    d = q.shape[1]
    dk = d // heads
    scale = 1.0 / math.sqrt(dk)

    def split(x):
        return x.reshape(batch, seq, heads, dk).transpose(0, 2, 1, 3)

    def merge(x):
        return x.transpose(0, 2, 1, 3).reshape(batch * seq, d)

    qh, kh, vh, doh = split(q), split(k), split(v), split(dout)
    dprobs = np.matmul(doh, vh.transpose(0, 1, 3, 2))
    dv = np.matmul(probs.transpose(0, 1, 3, 2), doh)
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    dq = np.matmul(dscores, kh) * scale
    dkk = np.matmul(dscores.transpose(0, 1, 3, 2), qh) * scale
    return merge(dq), merge(dkk), merge(dv)


def _np_layernorm_fwd(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def _np_layernorm_bwd(dy, xhat, rstd, gain):
    dxhat = dy * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def _np_xent_fwd(logits, targets, weights):
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(logits.shape[0]), targets]
    return float((nll * weights).sum() / weights.sum())


def _np_xent_bwd(logits, targets, weights, g):
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    probs = e / e.sum(axis=1, keepdims=True)
    probs[np.arange(logits.shape[0]), targets] -= 1.0
    return probs * (weights * (g / weights.sum()))[:, None]


def _np_scatter_add_rows(out, idx, src):
    np.add.at(out, idx, src)
    return out


numpy_kernels = SimpleNamespace(
    name="numpy",
    attention_fwd=_np_attention_fwd,
    attention_bwd=_np_attention_bwd,
    layernorm_fwd=_np_layernorm_fwd,
    layernorm_bwd=_np_layernorm_bwd,
    xent_fwd=_np_xent_fwd,
    xent_bwd=_np_xent_bwd,
    scatter_add_rows=_np_scatter_add_rows,
)


# ---------------------------------------------------------------------------
# numba implementations

numba_kernels = None

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_attention_fwd(q, k, v, mask, batch, seq, heads):
        d = q.shape[1]
        dk = d // heads
        scale = 1.0 / math.sqrt(dk)
        out = np.zeros((batch * seq, d))
        probs = np.zeros((batch, heads, seq, seq))
        row = np.empty(seq)
        for b in range(batch):
            base = b * seq
            for h in range(heads):
                c0 = h * dk
                for i in range(seq):
                    mx = -np.inf
                    for j in range(seq):
                        if mask[i, j]:
                            s = 0.0
                            for c in range(c0, c0 + dk):
                                s += q[base + i, c] * k[base + j, c]
                            s *= scale
                            row[j] = s
                            if s > mx:
                                mx = s
                    tot = 0.0
                    for j in range(seq):
                        if mask[i, j]:
                            e = math.exp(row[j] - mx)
                            row[j] = e
                            tot += e
                        else:
                            row[j] = 0.0
                    for j in range(seq):
                        p = row[j] / tot
                        probs[b, h, i, j] = p
                        if p != 0.0:
                            for c in range(c0, c0 + dk):
                                out[base + i, c] += p * v[base + j, c]
        return out, probs

    @njit(cache=True)
    def _nb_attention_bwd(dout, q, k, v, probs, batch, seq, heads):
        d = q.shape[1]
        dk = d // heads
        scale = 1.0 / math.sqrt(dk)
        dq = np.zeros_like(q)
        dkk = np.zeros_like(k)
        dv = np.zeros_like(v)
        dp = np.empty(seq)
        for b in range(batch):
            base = b * seq
            for h in range(heads):
                c0 = h * dk
                for i in range(seq):
                    acc = 0.0
                    for j in range(seq):
                        p = probs[b, h, i, j]
                        s = 0.0
                        for c in range(c0, c0 + dk):
                            s += dout[base + i, c] * v[base + j, c]
                            dv[base + j, c] += p * dout[base + i, c]
                        dp[j] = s
                        acc += s * p
                    for j in range(seq):
                        ds = probs[b, h, i, j] * (dp[j] - acc) * scale
                        if ds != 0.0:
                            for c in range(c0, c0 + dk):
                                dq[base + i, c] += ds * k[base + j, c]
                                dkk[base + j, c] += ds * q[base + i, c]
        return dq, dkk, dv

    @njit(cache=True)
    def _nb_layernorm_fwd(x, gain, bias, eps):
        n, d = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(n)
        for i in range(n):
            mu = 0.0
            for c in range(d):
                mu += x[i, c]
            mu /= d
            var = 0.0
            for c in range(d):
                t = x[i, c] - mu
                var += t * t
            var /= d
            r = 1.0 / math.sqrt(var + eps)
            rstd[i] = r
            for c in range(d):
                xh = (x[i, c] - mu) * r
                xhat[i, c] = xh
                y[i, c] = xh * gain[c] + bias[c]
        return y, xhat, rstd

    @njit(cache=True)
    def _nb_layernorm_bwd(dy, xhat, rstd, gain):
        n, d = dy.shape
        dx = np.empty_like(dy)
        dg = np.zeros(d)
        db = np.zeros(d)
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for c in range(d):
                g = dy[i, c] * gain[c]
                m1 += g
                m2 += g * xhat[i, c]
                dg[c] += dy[i, c] * xhat[i, c]
                db[c] += dy[i, c]
            m1 /= d
            m2 /= d
            for c in range(d):
                dx[i, c] = (dy[i, c] * gain[c] - m1 - xhat[i, c] * m2) * rstd[i]
        return dx, dg, db

    @njit(cache=True)
    def _nb_xent_fwd(logits, targets, weights):
        n, v = logits.shape
        tot = 0.0
        wsum = 0.0
        for i in range(n):
            wsum += weights[i]
            if weights[i] == 0.0:
                continue
            mx = logits[i, 0]
            for j in range(1, v):
                if logits[i, j] > mx:
                    mx = logits[i, j]
            s = 0.0
            for j in range(v):
                s += math.exp(logits[i, j] - mx)
            tot += weights[i] * (math.log(s) + mx - logits[i, targets[i]])
        return tot / wsum

    @njit(cache=True)
    def _nb_xent_bwd(logits, targets, weights, g):
        n, v = logits.shape
        out = np.zeros_like(logits)
        wsum = 0.0
        for i in range(n):
            wsum += weights[i]
        for i in range(n):
            if weights[i] == 0.0:
                continue
            mx = logits[i, 0]
            for j in range(1, v):
                if logits[i, j] > mx:
                    mx = logits[i, j]
            s = 0.0
            for j in range(v):
                e = math.exp(logits[i, j] - mx)
                out[i, j] = e
                s += e
            f = weights[i] * g / wsum
            for j in range(v):
                out[i, j] = out[i, j] / s * f
            out[i, targets[i]] -= f
        return out

    @njit(cache=True)
    def _nb_scatter_add_rows(out, idx, src):
        for r in range(idx.shape[0]):
            t = idx[r]
            for c in range(src.shape[1]):
                out[t, c] += src[r, c]
        return out

    numba_kernels = SimpleNamespace(
        name="numba",
        attention_fwd=_nb_attention_fwd,
        attention_bwd=_nb_attention_bwd,
        layernorm_fwd=_nb_layernorm_fwd,
        layernorm_bwd=_nb_layernorm_bwd,
        xent_fwd=_nb_xent_fwd,
        xent_bwd=_nb_xent_bwd,
        scatter_add_rows=_nb_scatter_add_rows,
    )


def _select():
    if numba_kernels is not None and os.environ.get("LORANAS_NUMBA", "1") != "0":
        return numba_kernels
    return numpy_kernels


K = _select()
BACKEND = K.name
