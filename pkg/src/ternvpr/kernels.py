"""Gated sparse-ternary matrix multiply and exact operation accounting.

One MAC is one multiply-add pair. TOPs are reported as ``2 * MACs / 1e12``.
A ternary linear at sparsity ``s`` is charged ``N * keep_count(s, D) * M``
MACs; attention score and value products and full-precision linears are
charged densely and are never gated.
"""

from __future__ import annotations

import threading
from collections import defaultdict

import numpy as np

from .config import ModelConfig
from .errors import DimensionError, UsageError
from .gate import GateMask, apply_mask, keep_count
from .tensor import matmul_ref
from .ternary import TernaryTensor, dequantize

__all__ = [
    "OpsCounter",
    "count_model_ops",
    "dense_ref",
    "macs_to_tops",
    "sparse_ternary_matmul",
    "ternary_linear_ops",
]


class OpsCounter:
    """Thread-safe MAC tally, total and per layer."""

    def __init__(self):
        self._lock = threading.Lock()
        self.macs = 0
        self.by_layer: dict[str, int] = defaultdict(int)

    def add(self, layer: str, macs: int) -> None:
        macs = int(macs)
        if macs < 0:
            raise ValueError("MAC increments must be non-negative")
        with self._lock:
            self.macs += macs
            self.by_layer[layer] += macs

    @property
    def tops(self) -> float:
        return macs_to_tops(self.macs)

    def __repr__(self) -> str:
        return f"OpsCounter(macs={self.macs}, layers={len(self.by_layer)})"


def macs_to_tops(macs: int) -> float:
    return 2.0 * macs / 1e12


def _check_conform(x: np.ndarray, m: GateMask, w: TernaryTensor) -> None:
    if x.ndim != 2:
        raise DimensionError(f"expected activations of shape (N, D), got {x.shape}")
    if tuple(m.shape) != x.shape:
        raise DimensionError(f"mask shape {m.shape} != activation shape {x.shape}")
    if w.shape[1] != x.shape[1]:
        raise DimensionError(f"weight shape {w.shape} does not conform to activations {x.shape}")


def sparse_ternary_matmul(
    x: np.ndarray,
    m: GateMask,
    w: TernaryTensor,
    counter: OpsCounter | None = None,
    layer: str = "",
) -> np.ndarray:
    """``gamma * (x * mask) @ codes.T``, accumulated in float64.

    Masked activations contribute exact zeros, so the result equals summing
    over kept columns only; the counter is charged for kept columns only.
    Ternary codes enter as +/-1 and 0, so the only true multiply per output
    element is the final ``gamma`` scale.
    """
    x = np.asarray(x)
    _check_conform(x, m, w)
    codes = w.code_matrix()
    xm = apply_mask(x, m).astype(np.float64)
    acc = np.matmul(xm, codes.T.astype(np.float64))
    out_dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float32
    out = (w.gamma * acc).astype(out_dtype)
    if counter is not None:
        counter.add(layer or w.name, x.shape[0] * m.keep * w.shape[0])
    return out


def dense_ref(x: np.ndarray, m: GateMask, w: TernaryTensor) -> np.ndarray:
    """Oracle: mask, then a plain matmul with the dequantized weight."""
    x = np.asarray(x)
    _check_conform(x, m, w)
    return matmul_ref(apply_mask(x, m), dequantize(w))


def ternary_linear_ops(rows: int, d_in: int, d_out: int, s: float) -> int:
    return rows * keep_count(s, d_in) * d_out


def count_model_ops(cfg: ModelConfig, s: float) -> int:
    """Closed-form MACs of one image forward at gate sparsity ``s``.

    Teachers (``cfg.quantized`` false) run ungated, so ``s`` must be 0 there.
    """
    n, d, hidden = cfg.tokens, cfg.dim, cfg.hidden
    if not cfg.quantized:
        keep_count(s, d)
        if s != 0:
            raise UsageError("full-precision models run ungated; s must be 0")
    total = cfg.num_patches * cfg.patch_dim * d
    per_block = (
        ternary_linear_ops(n, d, 3 * d, s)
        + n * n * d  # q k^T over all heads
        + n * n * d  # attn @ v over all heads
        + ternary_linear_ops(n, d, d, s)
        + ternary_linear_ops(n, d, hidden, s)
        + ternary_linear_ops(n, hidden, d, s)
    )
    return total + cfg.depth * per_block
