"""Configuration dataclasses and the strict JSON run-config loader."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

__all__ = [
    "EvalConfig",
    "ModelConfig",
    "RunConfig",
    "SCHEMA_VERSION",
    "SyntheticDatasetConfig",
    "TrainConfig",
    "load_run_config",
    "resolve_seed",
]

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Tiny ViT shape. Defaults are the desk configuration."""

    image: tuple[int, int, int] = (32, 32, 1)
    patch: int = 8
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    head_type: str = "CLS"
    quantized: bool = True

    def __post_init__(self):
        object.__setattr__(self, "image", tuple(int(v) for v in self.image))
        problems = []
        if len(self.image) != 3 or min(self.image) < 1:
            problems.append(f"image must be (H, W, C) with positive entries, got {self.image}")
        else:
            h, w, _ = self.image
            if self.patch < 1 or h % self.patch or w % self.patch:
                problems.append(f"patch {self.patch} must divide H={h} and W={w}")
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            problems.append(f"heads {self.heads} must divide dim {self.dim}")
        if self.depth < 1:
            problems.append(f"depth must be >= 1, got {self.depth}")
        if self.mlp_ratio <= 0 or self.hidden < 1:
            problems.append(f"mlp_ratio must give a positive hidden width, got {self.mlp_ratio}")
        if self.head_type != "CLS":
            problems.append(f"head_type must be 'CLS', got {self.head_type!r}")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def num_patches(self) -> int:
        h, w, _ = self.image
        return (h // self.patch) * (w // self.patch)

    @property
    def tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.image[2]

    @property
    def hidden(self) -> int:
        return int(round(self.mlp_ratio * self.dim))

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def descriptor_dim(self) -> int:
        return self.dim

    def twin(self, quantized: bool) -> ModelConfig:
        return dataclasses.replace(self, quantized=quantized)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for both training stages.

    ``batch_size`` is used by distillation; ``places_per_batch`` x
    ``images_per_place`` by fine-tuning. ``sparsity`` is the fixed gate level
    used during fine-tuning. ``ms_*`` are the multi-similarity parameters.
    """

    steps: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    s_start: float = 0.10
    s_end: float = 0.60
    places_per_batch: int = 8
    images_per_place: int = 4
    sparsity: float = 0.0
    ms_alpha: float = 2.0
    ms_beta: float = 50.0
    ms_lambda: float = 1.0
    seed: int | None = None

    def __post_init__(self):
        problems = []
        if self.steps < 1:
            problems.append(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.places_per_batch < 2 or self.images_per_place < 2:
            problems.append("fine-tuning needs >= 2 places x >= 2 images per batch")
        if not self.learning_rate > 0:
            problems.append(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.s_start <= self.s_end < 1.0:
            problems.append(f"need 0 <= s_start <= s_end < 1, got {self.s_start}, {self.s_end}")
        if not 0.0 <= self.sparsity < 1.0:
            problems.append(f"sparsity must lie in [0, 1), got {self.sparsity}")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass(frozen=True)
class SyntheticDatasetConfig:
    num_places: int = 50
    refs_per_place: int = 1
    queries_per_place: int = 2
    image: tuple[int, int, int] = (32, 32, 1)
    noise_std: float = 0.3
    brightness_jitter: float = 0.2
    max_shift_px: int = 2
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "image", tuple(int(v) for v in self.image))
        problems = []
        for name in ("num_places", "refs_per_place", "queries_per_place"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1, got {getattr(self, name)}")
        if len(self.image) != 3 or min(self.image) < 1:
            problems.append(f"image must be (H, W, C) with positive entries, got {self.image}")
        elif not 0 <= self.max_shift_px < min(self.image[:2]) / 4:
            problems.append(f"max_shift_px must be in [0, min(H, W)/4), got {self.max_shift_px}")
        if self.noise_std < 0:
            problems.append(f"noise_std must be >= 0, got {self.noise_std}")
        if not 0 <= self.brightness_jitter < 1:
            problems.append(f"brightness_jitter must be in [0, 1), got {self.brightness_jitter}")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass(frozen=True)
class EvalConfig:
    sparsity_levels: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
    recall_ks: tuple[int, ...] = (1, 5, 10)

    def __post_init__(self):
        object.__setattr__(self, "sparsity_levels", tuple(float(s) for s in self.sparsity_levels))
        object.__setattr__(self, "recall_ks", tuple(int(k) for k in self.recall_ks))
        if any(not 0.0 <= s < 1.0 for s in self.sparsity_levels):
            raise ConfigError(f"sparsity levels must lie in [0, 1), got {self.sparsity_levels}")
        if not self.recall_ks or any(k < 1 for k in self.recall_ks):
            raise ConfigError(f"recall_ks must be positive, got {self.recall_ks}")


@dataclass(frozen=True)
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train_distill: TrainConfig = field(default_factory=TrainConfig)
    train_finetune: TrainConfig = field(
        default_factory=lambda: TrainConfig(steps=300, learning_rate=5e-4)
    )
    train_teacher: TrainConfig = field(
        default_factory=lambda: TrainConfig(steps=300, learning_rate=1e-3)
    )
    dataset: SyntheticDatasetConfig = field(default_factory=SyntheticDatasetConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTIONS = {
    "model": ModelConfig,
    "train_distill": TrainConfig,
    "train_finetune": TrainConfig,
    "train_teacher": TrainConfig,
    "dataset": SyntheticDatasetConfig,
    "eval": EvalConfig,
}


def _build(cls, data: Any, where: str, defaults=None):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    defaults = cls() if defaults is None else defaults
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        default = getattr(defaults, f.name)
        if default is None:
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ConfigError(f"{where}.{f.name}: expected a non-negative integer")
        elif isinstance(default, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{where}.{f.name}: expected a list")
            value = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}.{f.name}: expected a boolean")
        elif isinstance(default, int) and not isinstance(default, bool):
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{where}.{f.name}: expected an integer")
        elif isinstance(default, float):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{where}.{f.name}: expected a number")
            value = float(value)
        kwargs[f.name] = value
    try:
        return dataclasses.replace(defaults, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def run_config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = sorted(set(data) - {"schema_version", "seed", *_SECTIONS})
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")
    if "schema_version" not in data:
        raise ConfigError("missing required key 'schema_version'")
    if data["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {data['schema_version']!r}, expected {SCHEMA_VERSION}")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    base = RunConfig()
    sections = {
        name: _build(cls, data[name], name, getattr(base, name)) if name in data else getattr(base, name)
        for name, cls in _SECTIONS.items()
    }
    return RunConfig(schema_version=SCHEMA_VERSION, seed=seed, **sections)


def load_run_config(path: str | os.PathLike | None) -> RunConfig:
    """Parse a JSON run config; ``None`` gives all defaults."""
    if path is None:
        return RunConfig()
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return run_config_from_dict(data)


def resolve_seed(flag: int | None, config_seed: int | None, env: dict | None = None) -> int:
    """Seed precedence: command-line flag > ``TAT_SEED`` > config > 0."""
    if flag is not None:
        return int(flag)
    env = os.environ if env is None else env
    raw = env.get("TAT_SEED")
    if raw not in (None, ""):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"TAT_SEED must be an integer, got {raw!r}") from exc
    if config_seed is not None:
        return int(config_seed)
    return 0
