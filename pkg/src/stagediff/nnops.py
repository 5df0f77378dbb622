"""Differentiable primitives for the denoiser: forward passes plus exact
vector-Jacobian products, composed by hand in model.py.

Every op takes float64 arrays, returns ``(out, cache)``, and has a matching
``*_bwd(cache, grad)`` that returns gradients in the same order as the
forward inputs (parameters last).
"""

from __future__ import annotations

import numpy as np

_LN_EPS = 1e-5


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    y = x @ w + b
    return y, (x, w)


def linear_bwd(cache, g):
    x, w = cache
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    gx = g @ w.T
    gw = x2.T @ g2
    gb = g2.sum(axis=0)
    return gx, gw, gb


def relu(x: np.ndarray):
    y = np.maximum(x, 0.0)
    return y, (x > 0.0)


def relu_bwd(cache, g):
    return g * cache


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return gain * xhat + bias, (xhat, inv, gain)


def layer_norm_bwd(cache, g):
    xhat, inv, gain = cache
    gxhat = g * gain
    m1 = gxhat.mean(axis=-1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
    gx = inv * (gxhat - m1 - xhat * m2)
    axes = tuple(range(g.ndim - 1))
    ggain = (g * xhat).sum(axis=axes)
    gbias = g.sum(axis=axes)
    return gx, ggain, gbias


def softmax(x: np.ndarray, axis: int):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return s, (s, axis)


def softmax_bwd(cache, g):
    s, axis = cache
    return s * (g - (g * s).sum(axis=axis, keepdims=True))


def film(m1: np.ndarray, m2: np.ndarray, w1: np.ndarray, w2: np.ndarray):
    """Feature-wise modulation: m1 @ w1 + (m2 @ w2) * m2 + m2."""
    p = m2 @ w2
    out = m1 @ w1 + p * m2 + m2
    return out, (m1, m2, p, w1, w2)


def film_bwd(cache, g):
    m1, m2, p, w1, w2 = cache
    gm1 = g @ w1.T
    gm2 = (g * m2) @ w2.T + g * p + g
    m1_2 = m1.reshape(-1, m1.shape[-1])
    gw1 = m1_2.T @ g.reshape(-1, g.shape[-1])
    m2_2 = m2.reshape(-1, m2.shape[-1])
    gw2 = m2_2.T @ (g * m2).reshape(-1, g.shape[-1])
    return gm1, gm2, gw1, gw2


def pna(m: np.ndarray, w: np.ndarray):
    """Concatenated max/min/mean/std pooling over rows, then a linear map."""
    mx = m.max(axis=0)
    mn = m.min(axis=0)
    mean = m.mean(axis=0)
    centered = m - mean
    var = (centered ** 2).mean(axis=0)
    std = np.sqrt(var)
    pooled = np.concatenate([mx, mn, mean, std])
    out = pooled @ w
    argmax = m.argmax(axis=0)
    argmin = m.argmin(axis=0)
    return out, (m.shape[0], argmax, argmin, centered, std, pooled, w)


def pna_bwd(cache, g):
    rows, argmax, argmin, centered, std, pooled, w = cache
    d = centered.shape[-1]
    gpooled = w @ g
    g_mx, g_mn, g_mean, g_std = (gpooled[:d], gpooled[d:2 * d],
                                 gpooled[2 * d:3 * d], gpooled[3 * d:])
    gm = np.zeros_like(centered)
    cols = np.arange(d)
    gm[argmax, cols] += g_mx
    gm[argmin, cols] += g_mn
    gm += g_mean / rows
    # std has zero subgradient where all rows coincide
    safe = np.where(std > 0.0, std, 1.0)
    gm += np.where(std > 0.0, g_std * centered / (rows * safe), 0.0)
    gw = np.outer(pooled, g)
    return gm, gw


def pair_scores(q: np.ndarray, k: np.ndarray):
    """Scaled per-head dot products: (n, h, df) x (n, h, df) -> (n, n, h)."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    s = np.einsum("ihd,jhd->ijh", q, k) * scale
    return s, (q, k, scale)


def pair_scores_bwd(cache, g):
    q, k, scale = cache
    gq = np.einsum("ijh,jhd->ihd", g, k) * scale
    gk = np.einsum("ijh,ihd->jhd", g, q) * scale
    return gq, gk


def attn_apply(attn: np.ndarray, v: np.ndarray):
    """Weighted value sum: (n, n, h) x (n, h, df) -> (n, h, df)."""
    out = np.einsum("ijh,jhd->ihd", attn, v)
    return out, (attn, v)


def attn_apply_bwd(cache, g):
    attn, v = cache
    gattn = np.einsum("ihd,jhd->ijh", g, v)
    gv = np.einsum("ijh,ihd->jhd", attn, g)
    return gattn, gv


def sym_pairs(e: np.ndarray):
    """Average a pair tensor with its transpose; exactly symmetric output."""
    return 0.5 * (e + e.transpose(1, 0, 2)), None


def sym_pairs_bwd(_cache, g):
    return 0.5 * (g + g.transpose(1, 0, 2))
