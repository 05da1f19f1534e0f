"""Absolute-mean ternary quantization and the 2-bit packed code format.

Codes are stored four per byte, code ``i`` of a byte in bits ``2i..2i+1``::

    00 -> 0    01 -> +1    10 -> -1    11 -> reserved (invalid)

Elements are packed in row-major order; padding codes in the last byte are 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CodecError, DimensionError, NumericError, ParameterError
from .tensor import as_dense

__all__ = [
    "QuantConfig",
    "TernaryTensor",
    "absmean_scale",
    "dequantize",
    "pack_codes",
    "quantize_ternary",
    "round_half_away",
    "unpack_codes",
]

# code value -> 2-bit field, indexed by code + 1
_ENCODE = np.array([0b10, 0b00, 0b01], dtype=np.uint8)
# 2-bit field -> code value; 0b11 is reserved
_DECODE = np.array([0, 1, -1, 0], dtype=np.int8)


@dataclass(frozen=True)
class QuantConfig:
    epsilon: float = 1e-6

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be > 0, got {self.epsilon}")


def pack_codes(values) -> bytes:
    """Pack ternary values into bytes (4 codes per byte)."""
    v = np.asarray(values).reshape(-1)
    if v.size == 0:
        return b""
    if not np.all((v == -1) | (v == 0) | (v == 1)):
        raise CodecError("pack_codes: values must lie in {-1, 0, +1}")
    fields = _ENCODE[v.astype(np.int64) + 1]
    pad = (-fields.size) % 4
    if pad:
        fields = np.concatenate([fields, np.zeros(pad, dtype=np.uint8)])
    quads = fields.reshape(-1, 4)
    packed = quads[:, 0] | (quads[:, 1] << 2) | (quads[:, 2] << 4) | (quads[:, 3] << 6)
    return packed.astype(np.uint8).tobytes()


def unpack_codes(data: bytes, count: int) -> np.ndarray:
    """Decode ``count`` ternary values; raises on the reserved field 0b11."""
    if count < 0:
        raise ParameterError(f"count must be >= 0, got {count}")
    nbytes = (count + 3) // 4
    raw = np.frombuffer(data, dtype=np.uint8, count=min(len(data), nbytes))
    if raw.size < nbytes:
        raise CodecError(f"need {nbytes} bytes for {count} codes, got {len(data)}")
    fields = np.stack([(raw >> s) & 0b11 for s in (0, 2, 4, 6)], axis=1).reshape(-1)[:count]
    bad = np.flatnonzero(fields == 0b11)
    if bad.size:
        raise CodecError(f"reserved code 0b11 at byte offset {int(bad[0]) // 4}")
    return _DECODE[fields]


@dataclass(frozen=True, eq=False)
class TernaryTensor:
    """Packed ternary codes with a single per-tensor scale ``gamma``."""

    shape: tuple[int, int]
    codes: bytes
    gamma: float
    name: str = ""
    _decoded: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if len(self.shape) != 2 or min(self.shape) < 1:
            raise DimensionError(f"TernaryTensor shape must be [M, D], got {self.shape}")
        if not (np.isfinite(self.gamma) and self.gamma >= 0):
            raise NumericError(f"gamma must be finite and >= 0, got {self.gamma}")
        expected = (self.size + 3) // 4
        if len(self.codes) != expected:
            raise CodecError(f"{self.name!r}: expected {expected} packed bytes, got {len(self.codes)}")

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def nbytes(self) -> int:
        """Payload bytes: the float32 scale plus packed codes."""
        return 4 + len(self.codes)

    def code_matrix(self) -> np.ndarray:
        """Decoded int8 codes of shape ``(M, D)``; cached after first decode."""
        if not self._decoded:
            self._decoded.append(unpack_codes(self.codes, self.size).reshape(self.shape))
        return self._decoded[0]


def absmean_scale(w) -> float:
    """Mean absolute value of ``w`` (float64 accumulation)."""
    w = np.asarray(w)
    if w.size == 0:
        raise DimensionError("absmean_scale of an empty tensor")
    return float(np.abs(w.astype(np.float64)).sum() / w.size)


def round_half_away(x: np.ndarray) -> np.ndarray:
    a = np.abs(x)
    whole = np.floor(a)
    # a - whole is exact, unlike floor(a + 0.5)
    return np.sign(x) * (whole + (a - whole >= 0.5))


def quantize_ternary(w, cfg: QuantConfig = QuantConfig(), name: str = "") -> TernaryTensor:
    """RoundClip(w / (gamma + eps), -1, 1) with ``gamma`` the absolute mean.

    ``gamma`` is rounded to float32 first (the stored precision) and that
    value is used for the division, so a stored tensor fully determines its
    own codes.
    """
    w = as_dense(w, ndim=2)
    if w.size == 0:
        raise DimensionError("quantize_ternary of an empty tensor")
    finite = np.isfinite(w)
    if not finite.all():
        idx = tuple(int(i) for i in np.argwhere(~finite)[0])
        raise NumericError(f"non-finite weight at index {idx}")
    gamma = float(np.float32(absmean_scale(w)))
    scaled = w.astype(np.float64) / (gamma + cfg.epsilon)
    codes = np.clip(round_half_away(scaled), -1, 1).astype(np.int8)
    return TernaryTensor(shape=w.shape, codes=pack_codes(codes), gamma=gamma, name=name)


def dequantize(t: TernaryTensor) -> np.ndarray:
    """``gamma * code`` as a float32 tensor."""
    return (np.float32(t.gamma) * t.code_matrix().astype(np.float32)).astype(np.float32)
