"""Binary model file (little-endian).

Layout::

    magic "TATV" | u32 version (=1)
    config: H, W, C, P, D, L, heads, mlp_ratio as f32 x 8 | head_type u8 | quantized u8
    u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 dtype | u8 rank | u32 dims[rank] | payload

dtype tags: 0 = float32 dense (row-major), 1 = ternary 2-bit (f32 gamma then
packed codes), 2 = float32 training state (latent weights, optimizer
moments, step counter). Training-state records are only written on request
and never count toward the inference footprint.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import (
    BadMagicError,
    CodecError,
    ConfigError,
    LoadError,
    ReservedCodeError,
    TruncatedError,
    VersionMismatchError,
)
from .model import VitModel, is_ternary_name, param_specs
from .ternary import TernaryTensor, unpack_codes

__all__ = [
    "DTYPE_DENSE",
    "DTYPE_STATE",
    "DTYPE_TERNARY",
    "MAGIC",
    "TensorRecord",
    "VERSION",
    "deserialize_model",
    "load_model",
    "read_records",
    "save_model",
    "serialize_model",
]

MAGIC = b"TATV"
VERSION = 1
DTYPE_DENSE, DTYPE_TERNARY, DTYPE_STATE = 0, 1, 2
_HEAD_TYPES = {"CLS": 0}
_CONFIG = struct.Struct("<8fBB")


@dataclass(frozen=True)
class TensorRecord:
    name: str
    dtype: int
    shape: tuple[int, ...]
    offset: int        # start of the record header
    header_bytes: int
    payload_offset: int
    payload_bytes: int
    gamma: float | None = None

    @property
    def total_bytes(self) -> int:
        return self.header_bytes + self.payload_bytes


def _record_header(name: str, dtype: int, shape) -> bytes:
    raw = name.encode("utf-8")
    return (
        struct.pack("<H", len(raw)) + raw + struct.pack("<BB", dtype, len(shape))
        + struct.pack(f"<{len(shape)}I", *shape)
    )


def serialize_model(model: VitModel, include_state: bool = False) -> bytes:
    cfg = model.config
    h, w, c = cfg.image
    chunks = []
    count = 0
    for name, shape in param_specs(cfg):
        p = model.params[name]
        if isinstance(p, TernaryTensor):
            chunks.append(_record_header(name, DTYPE_TERNARY, p.shape))
            chunks.append(struct.pack("<f", p.gamma) + p.codes)
        else:
            arr = np.ascontiguousarray(p, dtype="<f4")
            chunks.append(_record_header(name, DTYPE_DENSE, arr.shape))
            chunks.append(arr.tobytes())
        count += 1
    if include_state:
        state = {f"train.latent.{k}": v for k, v in model.latents.items()}
        state.update(model.train_state)
        for name, arr in state.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            chunks.append(_record_header(name, DTYPE_STATE, arr.shape))
            chunks.append(arr.tobytes())
            count += 1
    header = (
        MAGIC + struct.pack("<I", VERSION)
        + _CONFIG.pack(h, w, c, cfg.patch, cfg.dim, cfg.depth, cfg.heads, cfg.mlp_ratio,
                       _HEAD_TYPES[cfg.head_type], int(cfg.quantized))
        + struct.pack("<I", count)
    )
    return header + b"".join(chunks)


def save_model(model: VitModel, path: str | os.PathLike, include_state: bool = False) -> int:
    """Write the model file; returns its size in bytes."""
    data = serialize_model(model, include_state)
    Path(path).write_bytes(data)
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(
                f"truncated file: need {n} bytes for {what} at offset {self.pos}, "
                f"only {len(self.data) - self.pos} left"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def _read_header(r: _Reader) -> tuple[ModelConfig, int]:
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r} (\"TATV\")")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported format version {version} at offset 4, expected {VERSION}")
    h, w, c, patch, dim, depth, heads, ratio, head, quant = r.unpack(_CONFIG.format, "config block")
    head_names = {v: k for k, v in _HEAD_TYPES.items()}
    if head not in head_names:
        raise LoadError(f"unknown head type {head} at offset {r.pos - 2}")
    try:
        cfg = ModelConfig(
            image=(int(h), int(w), int(c)), patch=int(patch), dim=int(dim), depth=int(depth),
            heads=int(heads), mlp_ratio=float(ratio), head_type=head_names[head], quantized=bool(quant),
        )
    except ConfigError as exc:
        raise LoadError(f"invalid config block: {exc}") from exc
    (count,) = r.unpack("<I", "tensor count")
    return cfg, count


def _read_record(r: _Reader):
    start = r.pos
    (name_len,) = r.unpack("<H", "name length")
    try:
        name = r.take(name_len, "tensor name").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise LoadError(f"tensor name at offset {start + 2} is not UTF-8") from exc
    dtype, rank = r.unpack("<BB", f"dtype/rank of {name!r}")
    shape = r.unpack(f"<{rank}I", f"dims of {name!r}")
    header = r.pos - start
    n = int(np.prod(shape)) if rank else 1
    if dtype in (DTYPE_DENSE, DTYPE_STATE):
        payload = r.take(4 * n, f"payload of {name!r}")
        value = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
        gamma = None
    elif dtype == DTYPE_TERNARY:
        if rank != 2:
            raise LoadError(f"ternary tensor {name!r} at offset {start} has rank {rank}, expected 2")
        payload_start = r.pos
        (gamma,) = r.unpack("<f", f"gamma of {name!r}")
        codes = r.take((n + 3) // 4, f"codes of {name!r}")
        try:
            unpack_codes(codes, n)
        except CodecError as exc:
            raise ReservedCodeError(
                f"tensor {name!r}: {exc} (codes start at file offset {payload_start + 4})"
            ) from exc
        value = TernaryTensor(shape=shape, codes=codes, gamma=float(gamma), name=name)
        payload = b"\0" * (4 + len(codes))
    else:
        raise LoadError(f"unknown dtype tag {dtype} for {name!r} at offset {start + 2 + name_len}")
    rec = TensorRecord(
        name=name, dtype=dtype, shape=tuple(shape), offset=start, header_bytes=header,
        payload_offset=start + header, payload_bytes=len(payload), gamma=gamma,
    )
    return rec, value


def read_records(data: bytes) -> tuple[ModelConfig, list[TensorRecord]]:
    """Parse a model file into its config and per-tensor records."""
    r = _Reader(data)
    cfg, count = _read_header(r)
    records = [_read_record(r)[0] for _ in range(count)]
    if r.pos != len(data):
        raise LoadError(f"{len(data) - r.pos} trailing bytes after the last tensor (offset {r.pos})")
    return cfg, records


def deserialize_model(data: bytes) -> VitModel:
    r = _Reader(data)
    cfg, count = _read_header(r)
    params, latents, state = {}, {}, {}
    for _ in range(count):
        rec, value = _read_record(r)
        if rec.dtype == DTYPE_STATE:
            if rec.name.startswith("train.latent."):
                latents[rec.name[len("train.latent."):]] = value
            else:
                state[rec.name] = value
        else:
            params[rec.name] = value
    if r.pos != len(data):
        raise LoadError(f"{len(data) - r.pos} trailing bytes after the last tensor (offset {r.pos})")
    for name, shape in param_specs(cfg):
        if name not in params:
            raise LoadError(f"missing tensor {name!r}")
        p = params[name]
        want_ternary = cfg.quantized and is_ternary_name(name)
        if isinstance(p, TernaryTensor) != want_ternary:
            raise LoadError(f"tensor {name!r} has the wrong dtype for a {'student' if cfg.quantized else 'teacher'} model")
        if tuple(p.shape) != shape:
            raise LoadError(f"tensor {name!r} has shape {tuple(p.shape)}, expected {shape}")
    extra = sorted(set(params) - {n for n, _ in param_specs(cfg)})
    if extra:
        raise LoadError(f"unexpected tensor(s) {extra}")
    return VitModel(config=cfg, params=params, latents=latents, train_state=state)


def load_model(path: str | os.PathLike) -> VitModel:
    return deserialize_model(Path(path).read_bytes())
