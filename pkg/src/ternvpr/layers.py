"""Forward/backward pairs for the full-precision transformer sub-layers.

Forwards keep the input's float dtype (matrix products accumulate in
float64); backwards always work in float64.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

__all__ = [
    "LN_EPS",
    "attention",
    "attention_backward",
    "bmm",
    "gelu",
    "gelu_backward",
    "l2_normalize",
    "l2_normalize_backward",
    "layernorm",
    "layernorm_backward",
    "softmax",
]

LN_EPS = 1e-6
_F64 = np.float64


def bmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched ``a @ b`` accumulated in float64, returned in ``a``'s dtype."""
    return np.matmul(a.astype(_F64), b.astype(_F64)).astype(a.dtype)


def layernorm(x, weight, bias, eps: float = LN_EPS):
    x64 = x.astype(_F64)
    mu = x64.mean(axis=-1, keepdims=True)
    xc = x64 - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    y = xhat * weight.astype(_F64) + bias.astype(_F64)
    return y.astype(x.dtype), (xhat, rstd)


def layernorm_backward(dy, cache, weight):
    xhat, rstd = cache
    dy = dy.astype(_F64)
    d = xhat.shape[-1]
    lead = tuple(range(dy.ndim - 1))
    dweight = (dy * xhat).sum(axis=lead)
    dbias = dy.sum(axis=lead)
    dxhat = dy * weight.astype(_F64)
    dx = (rstd / d) * (
        d * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dweight, dbias


def gelu(x):
    """Exact (erf) GELU."""
    x64 = x.astype(_F64)
    return (0.5 * x64 * (1.0 + erf(x64 / math.sqrt(2.0)))).astype(x.dtype)


def gelu_backward(dy, x):
    x64 = x.astype(_F64)
    cdf = 0.5 * (1.0 + erf(x64 / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x64 * x64) / math.sqrt(2.0 * math.pi)
    return dy.astype(_F64) * (cdf + x64 * pdf)


def softmax(z, axis: int = -1):
    z64 = z.astype(_F64)
    e = np.exp(z64 - z64.max(axis=axis, keepdims=True))
    return (e / e.sum(axis=axis, keepdims=True)).astype(z.dtype)


def _split_heads(qkv, heads: int):
    b, n, three_d = qkv.shape
    d = three_d // 3
    parts = qkv.reshape(b, n, 3, heads, d // heads).transpose(2, 0, 3, 1, 4)
    return parts[0], parts[1], parts[2]


def attention(qkv: np.ndarray, heads: int):
    """Multi-head softmax attention on a fused ``(B, N, 3D)`` projection."""
    b, n, three_d = qkv.shape
    d = three_d // 3
    q, k, v = _split_heads(qkv, heads)
    scale = 1.0 / math.sqrt(d // heads)
    scores = bmm(q, k.transpose(0, 1, 3, 2)) * qkv.dtype.type(scale)
    probs = softmax(scores)
    out = bmm(probs, v)
    merged = out.transpose(0, 2, 1, 3).reshape(b, n, d)
    return merged, (q, k, v, probs, scale)


def attention_backward(dout, cache):
    q, k, v, probs, scale = cache
    b, h, n, dh = q.shape
    q, k, v, probs = (t.astype(_F64) for t in (q, k, v, probs))
    do = dout.astype(_F64).reshape(b, n, h, dh).transpose(0, 2, 1, 3)
    dprobs = do @ v.transpose(0, 1, 3, 2)
    dv = probs.transpose(0, 1, 3, 2) @ do
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    dq = (dscores @ k) * scale
    dk = (dscores.transpose(0, 1, 3, 2) @ q) * scale
    dqkv = np.stack([dq, dk, dv], axis=0)  # (3, B, h, N, dh)
    return dqkv.transpose(1, 3, 0, 2, 4).reshape(b, n, 3 * h * dh)


def l2_normalize(x):
    x64 = x.astype(_F64)
    norm = np.sqrt((x64 * x64).sum(axis=-1, keepdims=True))
    return (x64 / norm).astype(x.dtype), norm


def l2_normalize_backward(dy, y, norm):
    y = y.astype(_F64)
    dy = dy.astype(_F64)
    return (dy - y * (dy * y).sum(axis=-1, keepdims=True)) / norm
