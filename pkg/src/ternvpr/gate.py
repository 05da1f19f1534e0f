"""Per-token top-k activation gating and the training sparsity schedule.

Sparsity ``s`` is always the fraction of entries *zeroed*; each row keeps
``keep_count(s, D) = max(1, round((1 - s) * D))`` columns (ties rounded up).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import Prng

__all__ = [
    "GateMask",
    "ScheduleConfig",
    "apply_mask",
    "check_sparsity",
    "keep_count",
    "sample_sparsity",
    "schedule_max_sparsity",
    "topk_mask",
]


def check_sparsity(s: float) -> float:
    s = float(s)
    if not 0.0 <= s < 1.0:
        raise ParameterError(f"sparsity must lie in [0, 1), got {s}")
    return s


def keep_count(s: float, d: int) -> int:
    s = check_sparsity(s)
    return max(1, int(math.floor((1.0 - s) * d + 0.5)))


@dataclass(frozen=True, eq=False)
class GateMask:
    """Kept column indices per row, ascending. ``kept`` has shape ``(N, k)``."""

    shape: tuple[int, int]
    kept: np.ndarray
    sparsity: float

    @property
    def keep(self) -> int:
        return self.kept.shape[1]

    def dense(self) -> np.ndarray:
        """Boolean ``(N, D)`` mask."""
        m = np.zeros(self.shape, dtype=bool)
        np.put_along_axis(m, self.kept, True, axis=1)
        return m


def topk_mask(x: np.ndarray, s: float) -> GateMask:
    """Keep the ``keep_count(s, D)`` largest-|x| columns of every row.

    Equal magnitudes are broken toward the lower column index.
    """
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"topk_mask expects an (N, D) tensor with D >= 1, got {x.shape}")
    k = keep_count(s, x.shape[1])
    if k == x.shape[1]:
        kept = np.broadcast_to(np.arange(k), x.shape).copy()
    else:
        order = np.argsort(-np.abs(x), axis=1, kind="stable")
        kept = np.sort(order[:, :k], axis=1)
    return GateMask(shape=x.shape, kept=kept, sparsity=float(s))


def apply_mask(x: np.ndarray, m: GateMask) -> np.ndarray:
    x = np.asarray(x)
    if x.shape != tuple(m.shape):
        raise DimensionError(f"apply_mask: tensor shape {x.shape} != mask shape {m.shape}")
    if m.keep == x.shape[1]:
        return x.copy()
    out = np.zeros_like(x)
    np.put_along_axis(out, m.kept, np.take_along_axis(x, m.kept, axis=1), axis=1)
    return out


@dataclass(frozen=True)
class ScheduleConfig:
    s_start: float = 0.10
    s_end: float = 0.60
    total_steps: int = 1

    def __post_init__(self):
        if not 0.0 <= self.s_start <= self.s_end < 1.0:
            raise ParameterError(
                f"need 0 <= s_start <= s_end < 1, got s_start={self.s_start}, s_end={self.s_end}"
            )
        if self.total_steps < 1:
            raise ParameterError(f"total_steps must be >= 1, got {self.total_steps}")


def schedule_max_sparsity(step: int, cfg: ScheduleConfig) -> float:
    """Upper end of the sampling range, raised linearly over training."""
    if not 0 <= step <= cfg.total_steps:
        raise ParameterError(f"step {step} outside [0, {cfg.total_steps}]")
    if step == cfg.total_steps:
        return cfg.s_end
    return cfg.s_start + (cfg.s_end - cfg.s_start) * step / cfg.total_steps


def sample_sparsity(prng: Prng, step: int, cfg: ScheduleConfig) -> float:
    """Uniform draw from ``[s_start, schedule_max_sparsity(step)]``."""
    hi = schedule_max_sparsity(step, cfg)
    u = float(prng.uniform(1)[0])
    return cfg.s_start + (hi - cfg.s_start) * u
