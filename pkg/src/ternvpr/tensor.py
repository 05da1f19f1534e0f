"""Dense tensor substrate and the deterministic random generator.

A *dense tensor* is simply a C-contiguous ``numpy.ndarray`` of dtype
``float32``. Every matrix product in the package accumulates in float64 and
rounds the result back to the storage dtype.

Random numbers come from SplitMix64, a counter-based generator: output ``i``
of a stream seeded with ``seed`` is ``mix64(seed + (i + 1) * 0x9E3779B97F4A7C15)``
(all arithmetic mod 2**64), with the standard SplitMix64 finaliser::

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

Uniform doubles take the top 53 bits: ``(u >> 11) * 2**-53``. Normal samples
use Box-Muller on consecutive pairs ``(u0, u1)``:
``r = sqrt(-2 ln(1 - u0))`` and the pair ``(r cos 2πu1, r sin 2πu1)``.
"""

from __future__ import annotations

import zlib
from collections.abc import Sequence

import numpy as np

from .errors import DimensionError, NumericError

__all__ = [
    "Prng",
    "as_dense",
    "check_finite",
    "matmul_ref",
    "randn",
]

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _mix64_scalar(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class Prng:
    """SplitMix64 stream. ``counter`` is the number of 64-bit words consumed."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"Prng(seed={self.seed}, counter={self.counter})"

    def derive(self, *keys: int | str) -> Prng:
        """Independent child stream keyed by ``keys``; does not advance self."""
        z = self.seed
        for key in keys:
            if isinstance(key, str):
                key = zlib.crc32(key.encode("utf-8"))
            z = _mix64_scalar(z ^ _mix64_scalar(int(key) + 0x9E3779B97F4A7C15))
        return Prng(z)

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            out = _mix64(np.uint64(self.seed) + idx * _GOLDEN)
        self.counter += n
        return out

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 samples in [0, 1)."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform_range(self, low: float, high: float, n: int) -> np.ndarray:
        return low + (high - low) * self.uniform(n)

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """``n`` integers in [low, high)."""
        span = high - low
        return low + np.floor(self.uniform(n) * span).astype(np.int64)

    def normal(self, n: int) -> np.ndarray:
        """``n`` float64 standard-normal samples (Box-Muller)."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)
        return z[:n]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        js = self.integers(0, 1 << 62, n - 1)
        for i in range(n - 1, 0, -1):
            j = int(js[n - 1 - i] % (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if not shape or any(d < 1 for d in shape):
        raise DimensionError(f"shape must be non-empty with all dims >= 1, got {shape}")
    return shape


def randn(prng: Prng, shape: Sequence[int]) -> np.ndarray:
    """Standard-normal float32 tensor drawn from ``prng``."""
    shape = _check_shape(shape)
    n = int(np.prod(shape))
    return prng.normal(n).astype(np.float32).reshape(shape)


def check_finite(x: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise NumericError(f"{what} has a non-finite value at index {tuple(int(i) for i in bad)}")


def as_dense(x, ndim: int | None = None) -> np.ndarray:
    """Coerce to a contiguous float32 array, optionally checking rank."""
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"expected a rank-{ndim} tensor, got shape {arr.shape}")
    return arr


def matmul_ref(a: np.ndarray, b_t: np.ndarray) -> np.ndarray:
    """``a @ b_t.T`` accumulated in float64, returned in ``a``'s float dtype.

    ``a`` is ``(..., D)`` and ``b_t`` is ``(M, D)``.
    """
    a = np.asarray(a)
    b_t = np.asarray(b_t)
    if b_t.ndim != 2 or a.ndim < 1 or a.shape[-1] != b_t.shape[1]:
        raise DimensionError(
            f"matmul_ref: inner dimensions disagree for shapes {a.shape} and {b_t.shape}"
        )
    out_dtype = a.dtype if a.dtype in (np.float32, np.float64) else np.float32
    out = np.matmul(a.astype(np.float64), b_t.astype(np.float64).T)
    return out.astype(out_dtype)
