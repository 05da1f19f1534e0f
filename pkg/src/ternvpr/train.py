"""Training: hand-derived backward pass, Adam, distillation and fine-tuning.

Ternary tensors are trained through float32 latent (shadow) weights that are
re-quantized after every update. Gradients reach the latents unchanged
(identity straight-through estimator), and gate masks are treated as
constants in the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .errors import DimensionError, NumericError, UsageError
from .gate import ScheduleConfig, sample_sparsity
from .layers import (
    attention_backward,
    gelu_backward,
    l2_normalize,
    l2_normalize_backward,
    layernorm_backward,
)
from .model import HEAD_PARAMS, ForwardCache, VitModel, forward_batch, requantize
from .retrieval import ImageSet
from .tensor import Prng

__all__ = [
    "Adam",
    "FreezeMask",
    "StepRecord",
    "backward",
    "default_freeze_mask",
    "distill_loss",
    "distill_loss_grad",
    "multisim_loss",
    "multisim_loss_grad",
    "train_distill",
    "train_finetune",
    "write_loss_curve",
]

_F64 = np.float64


# -- losses ----------------------------------------------------------------

def distill_loss(s_tokens, t_tokens) -> float:
    """Mean squared error over every token entry."""
    s_tokens, t_tokens = np.asarray(s_tokens), np.asarray(t_tokens)
    if s_tokens.shape != t_tokens.shape:
        raise DimensionError(f"student tokens {s_tokens.shape} vs teacher tokens {t_tokens.shape}")
    diff = s_tokens.astype(_F64) - t_tokens.astype(_F64)
    return float(np.mean(diff * diff))


def distill_loss_grad(s_tokens, t_tokens):
    """Loss and its gradient with respect to the student tokens."""
    loss = distill_loss(s_tokens, t_tokens)
    diff = np.asarray(s_tokens, dtype=_F64) - np.asarray(t_tokens, dtype=_F64)
    return loss, 2.0 * diff / diff.size


def _as_matrix(descriptors) -> np.ndarray:
    if isinstance(descriptors, np.ndarray):
        return descriptors.astype(_F64)
    return np.stack([getattr(d, "values", d) for d in descriptors]).astype(_F64)


def _soft_term(z: np.ndarray, mask: np.ndarray):
    """Row-wise ``log(1 + sum_{mask} exp(z))`` and its derivative w.r.t. ``z``."""
    zm = np.where(mask, z, -np.inf)
    top = np.maximum(zm.max(axis=1, keepdims=True), 0.0)
    e = np.where(mask, np.exp(zm - top), 0.0)
    denom = np.exp(-top) + e.sum(axis=1, keepdims=True)
    return (top + np.log(denom))[:, 0], e / denom


def multisim_loss_grad(descriptors, labels, alpha: float = 2.0, beta: float = 50.0, lam: float = 1.0):
    """Multi-similarity loss over a labelled batch and its gradient.

    Similarities are plain dot products, i.e. cosine similarity for the
    unit-norm descriptors the model emits.
    """
    x = _as_matrix(descriptors)
    labels = np.asarray(labels)
    b = x.shape[0]
    if labels.shape != (b,):
        raise DimensionError(f"{b} descriptors but labels of shape {labels.shape}")
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(b, dtype=bool)
    neg = ~same
    if not pos.any():
        raise UsageError("multi-similarity loss needs at least one positive pair in the batch")
    sim = x @ x.T
    pos_val, pos_w = _soft_term(-alpha * (sim - lam), pos)
    neg_val, neg_w = _soft_term(beta * (sim - lam), neg)
    loss = float(np.mean(pos_val / alpha + neg_val / beta))
    dsim = (-pos_w + neg_w) / b
    return loss, (dsim + dsim.T) @ x


def multisim_loss(descriptors, labels, alpha: float = 2.0, beta: float = 50.0, lam: float = 1.0) -> float:
    return multisim_loss_grad(descriptors, labels, alpha, beta, lam)[0]


# -- backward --------------------------------------------------------------

def _linear_backward(w_eff, dy, lc, grads, name):
    lead = dy.shape[:-1]
    dy2 = dy.reshape(-1, dy.shape[-1]).astype(_F64)
    x = lc.x.astype(_F64)
    if lc.mask is not None:
        keep = lc.mask.dense()
        x = np.where(keep, x, 0.0)
    grads[name + ".weight"] = dy2.T @ x
    grads[name + ".bias"] = dy2.sum(axis=0)
    dx = dy2 @ w_eff
    if lc.mask is not None:
        dx = np.where(keep, dx, 0.0)
    return dx.reshape(*lead, -1)


def backward(model: VitModel, cache: ForwardCache, d_tokens) -> dict[str, np.ndarray]:
    """Float64 gradients for every parameter given dL/d(final tokens).

    For ternary tensors the returned gradient is the one with respect to the
    effective weight ``gamma * codes``; under the identity straight-through
    estimator it is also the latent gradient.
    """
    if cache is None or len(cache.blocks) != model.config.depth:
        raise UsageError("backward needs the cache of a forward_batch(keep_cache=True) call on this model")
    cfg = model.config
    d_tokens = np.asarray(d_tokens, dtype=_F64)
    b = cache.patches.shape[0]
    if d_tokens.shape != (b, cfg.tokens, cfg.dim):
        raise DimensionError(f"d_tokens shape {d_tokens.shape} does not match the cached forward")
    p = model.params
    grads: dict[str, np.ndarray] = {}

    dx, grads["norm.weight"], grads["norm.bias"] = layernorm_backward(d_tokens, cache.final_ln, p["norm.weight"])
    for i in reversed(range(cfg.depth)):
        pre = f"blocks.{i}."
        blk = cache.blocks[i]
        lin = blk["lin"]
        w = {n: model.effective_weight(pre + n + ".weight").astype(_F64)
             for n in ("attn.qkv", "attn.proj", "mlp.fc1", "mlp.fc2")}

        dg = _linear_backward(w["mlp.fc2"], dx, lin[3], grads, pre + "mlp.fc2")
        dh = gelu_backward(dg, blk["h"])
        da2 = _linear_backward(w["mlp.fc1"], dh, lin[2], grads, pre + "mlp.fc1")
        dx2, grads[pre + "norm2.weight"], grads[pre + "norm2.bias"] = layernorm_backward(
            da2, blk["ln2"], p[pre + "norm2.weight"])
        dx2 = dx2 + dx

        datt = _linear_backward(w["attn.proj"], dx2, lin[1], grads, pre + "attn.proj")
        dqkv = attention_backward(datt, blk["att"])
        da1 = _linear_backward(w["attn.qkv"], dqkv, lin[0], grads, pre + "attn.qkv")
        dx1, grads[pre + "norm1.weight"], grads[pre + "norm1.bias"] = layernorm_backward(
            da1, blk["ln1"], p[pre + "norm1.weight"])
        dx = dx1 + dx2

    grads["pos_embed"] = dx.sum(axis=0)
    grads["cls_token"] = dx[:, 0, :].sum(axis=0)
    demb = dx[:, 1:, :].reshape(-1, cfg.dim)
    patches = cache.patches.reshape(-1, cfg.patch_dim).astype(_F64)
    grads["patch_embed.weight"] = demb.T @ patches
    grads["patch_embed.bias"] = demb.sum(axis=0)
    return grads


def cls_descriptor_backward(tokens, d_desc):
    """Route dL/d(descriptor) back to dL/d(tokens) through the CLS head."""
    tokens = np.asarray(tokens)
    desc, norm = l2_normalize(tokens[:, 0, :].astype(_F64))
    d_tokens = np.zeros(tokens.shape, dtype=_F64)
    d_tokens[:, 0, :] = l2_normalize_backward(d_desc, desc, norm)
    return d_tokens


# -- optimizer -------------------------------------------------------------

class Adam:
    """Adam whose moments live in ``model.train_state`` as float32 arrays."""

    def __init__(self, model: VitModel, cfg: TrainConfig):
        self.model = model
        self.lr = cfg.learning_rate
        self.beta1 = cfg.beta1
        self.beta2 = cfg.beta2
        self.eps = cfg.adam_eps

    @property
    def step_count(self) -> int:
        step = self.model.train_state.get("train.step")
        return 0 if step is None else int(step[0])

    def _target(self, name: str) -> dict:
        return self.model.latents if name in self.model.latents else self.model.params

    def step(self, grads: dict[str, np.ndarray]) -> None:
        state = self.model.train_state
        t = self.step_count + 1
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        touched, updates = [], []
        for name in sorted(grads):
            g = grads[name].astype(_F64)
            target = self._target(name)
            m = state.get(f"train.adam_m.{name}", np.zeros(g.shape, np.float32)).astype(_F64)
            v = state.get(f"train.adam_v.{name}", np.zeros(g.shape, np.float32)).astype(_F64)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            with np.errstate(over="ignore"):
                new = (target[name].astype(_F64) - update).astype(np.float32)
                m32, v32 = m.astype(np.float32), v.astype(np.float32)
            for label, arr in (("weights", new), ("first moment", m32), ("second moment", v32)):
                if not np.isfinite(arr).all():
                    raise NumericError(f"optimizer step {t}: {label} of {name!r} left the float32 range")
            updates.append((target, name, new, m32, v32))
        for target, name, new, m32, v32 in updates:
            target[name] = new
            state[f"train.adam_m.{name}"] = m32
            state[f"train.adam_v.{name}"] = v32
            if target is self.model.latents:
                touched.append(name)
        state["train.step"] = np.array([t], dtype=np.float32)
        requantize(self.model, touched)


# -- freezing --------------------------------------------------------------

@dataclass(frozen=True)
class FreezeMask:
    trainable: frozenset

    def __post_init__(self):
        object.__setattr__(self, "trainable", frozenset(self.trainable))

    def check(self, model: VitModel) -> None:
        if not self.trainable:
            raise UsageError("FreezeMask has no trainable tensors")
        unknown = sorted(self.trainable - set(model.names()))
        if unknown:
            raise UsageError(f"FreezeMask names unknown tensors: {unknown}")

    @classmethod
    def all(cls, model: VitModel) -> FreezeMask:
        return cls(frozenset(model.names()))


def default_freeze_mask(model: VitModel) -> FreezeMask:
    """Head (final LayerNorm) plus every tensor of the last two blocks."""
    depth = model.config.depth
    last = {f"blocks.{i}." for i in range(max(0, depth - 2), depth)}
    names = {n for n in model.names() if n in HEAD_PARAMS or any(n.startswith(p) for p in last)}
    return FreezeMask(frozenset(names))


# -- training loops --------------------------------------------------------

@dataclass(frozen=True)
class StepRecord:
    step: int
    sparsity: float
    loss: float


def write_loss_curve(records, path) -> None:
    lines = ["step,sparsity,loss"]
    lines += [f"{r.step},{r.sparsity:.4f},{r.loss:.6g}" for r in records]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _check_finite_loss(loss: float, step: int) -> None:
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss} at step {step}")


def _check_aligned(student: VitModel, teacher: VitModel) -> None:
    if student.config.twin(True) != teacher.config.twin(True):
        raise UsageError("student and teacher configs differ beyond quantization")
    if teacher.config.quantized:
        raise UsageError("the teacher must be a full-precision model")


def train_distill(
    student: VitModel,
    teacher: VitModel,
    dataset: ImageSet,
    cfg: TrainConfig,
    seed: int = 0,
    callback=None,
    resume: bool = False,
) -> list[StepRecord]:
    """Token-level MSE distillation with a rising sparsity range (in place).

    Step ``t`` draws its batch and sparsity from a stream keyed on
    ``(seed, t)``, so a run resumed (``resume=True``) from a saved training
    state continues exactly as an uninterrupted run would.
    """
    _check_aligned(student, teacher)
    if not resume:
        student.train_state.clear()
    sched = ScheduleConfig(cfg.s_start, cfg.s_end, cfg.steps)
    opt = Adam(student, cfg)
    root = Prng(seed).derive("distill")
    records = []
    n = len(dataset.images)
    for step in range(opt.step_count, cfg.steps):
        prng = root.derive(step)
        idx = prng.integers(0, n, cfg.batch_size)
        s = sample_sparsity(prng, step, sched) if student.quantized else 0.0
        images = dataset.images[idx]
        target, _ = forward_batch(teacher, images, 0.0)
        tokens, cache = forward_batch(student, images, s, keep_cache=True)
        loss, d_tokens = distill_loss_grad(tokens, target)
        _check_finite_loss(loss, step)
        opt.step(backward(student, cache, d_tokens))
        records.append(StepRecord(step, s, loss))
        if callback is not None:
            callback(records[-1])
    return records


def _sample_places(prng: Prng, dataset: ImageSet, places: int, per_place: int):
    labels = dataset.place_ids
    uniq = np.unique(labels)
    if len(uniq) < places:
        raise UsageError(f"need {places} places per batch, dataset has {len(uniq)}")
    chosen = uniq[prng.permutation(len(uniq))[:places]]
    idx = []
    for place in chosen:
        pool = np.flatnonzero(labels == place)
        if len(pool) >= per_place:
            pick = pool[prng.permutation(len(pool))[:per_place]]
        else:
            pick = pool[prng.integers(0, len(pool), per_place)]
        idx.extend(int(i) for i in pick)
    return np.array(idx), labels[idx]


def train_finetune(
    model: VitModel,
    dataset: ImageSet,
    cfg: TrainConfig,
    freeze: FreezeMask | None = None,
    seed: int = 0,
    callback=None,
    resume: bool = False,
) -> list[StepRecord]:
    """Multi-similarity fine-tuning of the trainable subset (in place).

    The gate runs at the fixed level ``cfg.sparsity``. Tensors outside
    ``freeze.trainable`` are never written.
    """
    freeze = default_freeze_mask(model) if freeze is None else freeze
    freeze.check(model)
    if not resume:
        model.train_state.clear()
    s = cfg.sparsity if model.quantized else 0.0
    if model.quantized:
        for name in freeze.trainable & set(model.params):
            if name not in model.latents and name.endswith(".weight") and not isinstance(
                model.params[name], np.ndarray
            ):
                model.latents[name] = model.effective_weight(name).copy()
    opt = Adam(model, cfg)
    root = Prng(seed).derive("finetune")
    records = []
    for step in range(opt.step_count, cfg.steps):
        prng = root.derive(step)
        idx, labels = _sample_places(prng, dataset, cfg.places_per_batch, cfg.images_per_place)
        tokens, cache = forward_batch(model, dataset.images[idx], s, keep_cache=True)
        desc, _ = l2_normalize(tokens[:, 0, :].astype(_F64))
        loss, d_desc = multisim_loss_grad(desc, labels, cfg.ms_alpha, cfg.ms_beta, cfg.ms_lambda)
        _check_finite_loss(loss, step)
        grads = backward(model, cache, cls_descriptor_backward(tokens, d_desc))
        opt.step({k: v for k, v in grads.items() if k in freeze.trainable})
        records.append(StepRecord(step, s, loss))
        if callback is not None:
            callback(records[-1])
    return records
