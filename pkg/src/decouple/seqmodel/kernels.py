"""Hot kernels: causal attention and layer norm, forward and backward.

Each kernel has a numpy reference implementation (``*_numpy``) and a
numba-jitted twin (``*_numba``); the public names dispatch on the backend
chosen in :mod:`decouple.seqmodel.backend`.  Both paths compute the same
quantities in float64 without fastmath, so they agree to rounding error.

Attention takes an additive score-bias tensor instead of learned absolute
positions; the caller builds it from fixed per-head distance penalties plus
the learned segment-pair gate.  The backward pass returns the gradient
w.r.t. the raw scores so the gate can be trained.
"""

from __future__ import annotations

import math

import numpy as np

from .backend import BACKEND

__all__ = [
    "attention_forward",
    "attention_backward",
    "layernorm_forward",
    "layernorm_backward",
    "alibi_slopes",
]


def alibi_slopes(n_heads: int) -> np.ndarray:
    """Geometric distance-penalty slopes, one per head."""
    return np.array([2.0 ** (-8.0 * (h + 1) / n_heads) for h in range(n_heads)])


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def attention_forward_numpy(q, k, v, bias):
    """Multi-head causal attention with an additive score bias.

    q, k, v: (B, H, T, Dh); bias: (B, H, T, T), added to q.k/sqrt(Dh) before
    the causal softmax.  Returns (out, probs) with probs kept for the
    backward pass; rows above the diagonal are exactly zero.
    """
    B, H, T, Dh = q.shape
    scale = 1.0 / math.sqrt(Dh)
    scores = np.einsum("bhid,bhjd->bhij", q, k) * scale + bias
    idx = np.arange(T)
    causal = idx[None, :] <= idx[:, None]
    scores = np.where(causal[None, None, :, :], scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    out = np.einsum("bhij,bhjd->bhid", probs, v)
    return out, probs


def attention_backward_numpy(dout, q, k, v, probs):
    """Gradients of attention_forward w.r.t. q, k, v and the raw scores."""
    Dh = q.shape[-1]
    scale = 1.0 / math.sqrt(Dh)
    dv = np.einsum("bhij,bhid->bhjd", probs, dout)
    dprobs = np.einsum("bhid,bhjd->bhij", dout, v)
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    dscores = probs * (dprobs - inner)
    dq = np.einsum("bhij,bhjd->bhid", dscores, k) * scale
    dk = np.einsum("bhij,bhid->bhjd", dscores, q) * scale
    return dq, dk, dv, dscores


def layernorm_forward_numpy(x, gamma, beta, eps=1e-5):
    """Row-wise layer norm over the last axis.  Returns (y, xhat, rstd)."""
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * rstd
    return xhat * gamma + beta, xhat, rstd[..., 0]


def layernorm_backward_numpy(dy, xhat, rstd, gamma):
    """Gradients of layernorm_forward w.r.t. x, gamma, beta."""
    D = xhat.shape[-1]
    dg = (dy * xhat).reshape(-1, D).sum(axis=0)
    db = dy.reshape(-1, D).sum(axis=0)
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[..., None]
    return dx, dg, db


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if BACKEND == "numba":
    from numba import njit, prange

    @njit(cache=True, parallel=True)
    def _attention_forward_jit(q, k, v, bias, out, probs):
        B, H, T, Dh = q.shape
        scale = 1.0 / math.sqrt(Dh)
        for bh in prange(B * H):
            b = bh // H
            h = bh % H
            for i in range(T):
                row = probs[b, h, i]
                m = -1e300
                for j in range(i + 1):
                    s = 0.0
                    for d in range(Dh):
                        s += q[b, h, i, d] * k[b, h, j, d]
                    s = s * scale + bias[b, h, i, j]
                    row[j] = s
                    if s > m:
                        m = s
                total = 0.0
                for j in range(i + 1):
                    e = math.exp(row[j] - m)
                    row[j] = e
                    total += e
                for j in range(i + 1):
                    row[j] /= total
                for d in range(Dh):
                    acc = 0.0
                    for j in range(i + 1):
                        acc += row[j] * v[b, h, j, d]
                    out[b, h, i, d] = acc

    @njit(cache=True, parallel=True)
    def _attention_backward_jit(dout, q, k, v, probs, scale, dq, dk, dv, dscores):
        B, H, T, Dh = q.shape
        for bh in prange(B * H):
            b = bh // H
            h = bh % H
            for i in range(T):
                inner = 0.0
                for j in range(i + 1):
                    dp = 0.0
                    for d in range(Dh):
                        dp += dout[b, h, i, d] * v[b, h, j, d]
                    inner += dp * probs[b, h, i, j]
                for j in range(i + 1):
                    dp = 0.0
                    for d in range(Dh):
                        dp += dout[b, h, i, d] * v[b, h, j, d]
                    ds = probs[b, h, i, j] * (dp - inner)
                    dscores[b, h, i, j] = ds
                    for d in range(Dh):
                        dq[b, h, i, d] += ds * k[b, h, j, d] * scale
                        dk[b, h, j, d] += ds * q[b, h, i, d] * scale
                        dv[b, h, j, d] += probs[b, h, i, j] * dout[b, h, i, d]

    def attention_forward_numba(q, k, v, bias):
        B, H, T, Dh = q.shape
        out = np.empty_like(q)
        probs = np.zeros((B, H, T, T))
        _attention_forward_jit(q, k, v, np.ascontiguousarray(bias), out, probs)
        return out, probs

    def attention_backward_numba(dout, q, k, v, probs):
        scale = 1.0 / math.sqrt(q.shape[-1])
        dq = np.zeros_like(q)
        dk = np.zeros_like(k)
        dv = np.zeros_like(v)
        dscores = np.zeros_like(probs)
        _attention_backward_jit(
            np.ascontiguousarray(dout), q, k, v, probs, scale, dq, dk, dv, dscores
        )
        return dq, dk, dv, dscores

    @njit(cache=True)
    def _layernorm_forward_jit(x, gamma, beta, eps, y, xhat, rstd):
        N, D = x.shape
        for n in range(N):
            mean = 0.0
            for d in range(D):
                mean += x[n, d]
            mean /= D
            var = 0.0
            for d in range(D):
                diff = x[n, d] - mean
                var += diff * diff
            var /= D
            r = 1.0 / math.sqrt(var + eps)
            rstd[n] = r
            for d in range(D):
                xh = (x[n, d] - mean) * r
                xhat[n, d] = xh
                y[n, d] = xh * gamma[d] + beta[d]

    def layernorm_forward_numba(x, gamma, beta, eps=1e-5):
        shape = x.shape
        flat = np.ascontiguousarray(x.reshape(-1, shape[-1]))
        y = np.empty_like(flat)
        xhat = np.empty_like(flat)
        rstd = np.empty(flat.shape[0])
        _layernorm_forward_jit(flat, gamma, beta, eps, y, xhat, rstd)
        return y.reshape(shape), xhat.reshape(shape), rstd.reshape(shape[:-1])

    @njit(cache=True)
    def _layernorm_backward_jit(dy, xhat, rstd, gamma, dx, dg, db):
        N, D = dy.shape
        for n in range(N):
            m1 = 0.0
            m2 = 0.0
            for d in range(D):
                dxh = dy[n, d] * gamma[d]
                m1 += dxh
                m2 += dxh * xhat[n, d]
                dg[d] += dy[n, d] * xhat[n, d]
                db[d] += dy[n, d]
            m1 /= D
            m2 /= D
            for d in range(D):
                dxh = dy[n, d] * gamma[d]
                dx[n, d] = (dxh - m1 - xhat[n, d] * m2) * rstd[n]

    def layernorm_backward_numba(dy, xhat, rstd, gamma):
        shape = dy.shape
        D = shape[-1]
        dy_flat = np.ascontiguousarray(dy.reshape(-1, D))
        xhat_flat = np.ascontiguousarray(xhat.reshape(-1, D))
        dx = np.empty_like(dy_flat)
        dg = np.zeros(D)
        db = np.zeros(D)
        _layernorm_backward_jit(dy_flat, xhat_flat, rstd.reshape(-1), gamma, dx, dg, db)
        return dx.reshape(shape), dg, db

    attention_forward = attention_forward_numba
    attention_backward = attention_backward_numba
    layernorm_forward = layernorm_forward_numba
    layernorm_backward = layernorm_backward_numba
else:
    attention_forward = attention_forward_numpy
    attention_backward = attention_backward_numpy
    layernorm_forward = layernorm_forward_numpy
    layernorm_backward = layernorm_backward_numpy
