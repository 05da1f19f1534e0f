"""Tiny pre-norm ViT with ternary gated projections and a CLS descriptor head.

Student models hold the four per-block projections (fused QKV, attention
output, MLP up, MLP down) as :class:`TernaryTensor`; everything else (patch
embedding, biases, LayerNorms, CLS token, positional embeddings) stays in
float32. Teachers are the same network with every tensor in float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .errors import DimensionError, NumericError, UsageError
from .gate import check_sparsity, topk_mask
from .kernels import OpsCounter, sparse_ternary_matmul
from .layers import attention, gelu, l2_normalize, layernorm
from .tensor import Prng, as_dense, matmul_ref
from .ternary import TernaryTensor, dequantize, quantize_ternary

__all__ = [
    "Descriptor",
    "ModelConfig",
    "TERNARY_LAYERS",
    "VitModel",
    "cls_descriptors",
    "dequantized_twin",
    "descriptor_head_cls",
    "forward",
    "forward_batch",
    "init_model",
    "param_specs",
    "patchify",
    "requantize",
]

TERNARY_LAYERS = ("attn.qkv", "attn.proj", "mlp.fc1", "mlp.fc2")
HEAD_PARAMS = ("norm.weight", "norm.bias")


def param_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list; the order is the on-disk order."""
    d, hid = cfg.dim, cfg.hidden
    specs = [
        ("patch_embed.weight", (d, cfg.patch_dim)),
        ("patch_embed.bias", (d,)),
        ("cls_token", (d,)),
        ("pos_embed", (cfg.tokens, d)),
    ]
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        specs += [
            (p + "norm1.weight", (d,)),
            (p + "norm1.bias", (d,)),
            (p + "attn.qkv.weight", (3 * d, d)),
            (p + "attn.qkv.bias", (3 * d,)),
            (p + "attn.proj.weight", (d, d)),
            (p + "attn.proj.bias", (d,)),
            (p + "norm2.weight", (d,)),
            (p + "norm2.bias", (d,)),
            (p + "mlp.fc1.weight", (hid, d)),
            (p + "mlp.fc1.bias", (hid,)),
            (p + "mlp.fc2.weight", (d, hid)),
            (p + "mlp.fc2.bias", (d,)),
        ]
    specs += [("norm.weight", (d,)), ("norm.bias", (d,))]
    return specs


def is_ternary_name(name: str) -> bool:
    return name.startswith("blocks.") and name.endswith(".weight") and any(
        name.endswith(layer + ".weight") for layer in TERNARY_LAYERS
    )


@dataclass
class VitModel:
    """Parameters by name plus optional training state.

    ``latents`` holds the float32 shadow weight of each ternary tensor;
    ``train_state`` holds optimizer moments and the step counter.
    """

    config: ModelConfig
    params: dict[str, np.ndarray | TernaryTensor]
    latents: dict[str, np.ndarray] = field(default_factory=dict)
    train_state: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def quantized(self) -> bool:
        return self.config.quantized

    def names(self) -> list[str]:
        return [name for name, _ in param_specs(self.config)]

    def effective_weight(self, name: str) -> np.ndarray:
        p = self.params[name]
        return dequantize(p) if isinstance(p, TernaryTensor) else p


def _trunc_normal(prng: Prng, shape, std: float = 0.02) -> np.ndarray:
    n = int(np.prod(shape))
    z = prng.normal(n)
    bad = np.flatnonzero(np.abs(z) > 2.0)
    while bad.size:
        z[bad] = prng.normal(bad.size)
        bad = bad[np.abs(z[bad]) > 2.0]
    return (std * z).astype(np.float32).reshape(shape)


def init_model(cfg: ModelConfig, prng: Prng) -> VitModel:
    """Truncated-normal (std 0.02) weights, zero biases, unit LayerNorm gains.

    Each tensor draws from its own stream derived from its name, so a
    student and its full-precision twin built from one seed share latents.
    """
    params: dict = {}
    latents: dict = {}
    for name, shape in param_specs(cfg):
        if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "norm.weight":
            value = np.ones(shape, dtype=np.float32)
        elif name.endswith(".bias"):
            value = np.zeros(shape, dtype=np.float32)
        else:
            value = _trunc_normal(prng.derive(name), shape)
        if cfg.quantized and is_ternary_name(name):
            latents[name] = value
            params[name] = quantize_ternary(value, name=name)
        else:
            params[name] = value
    return VitModel(config=cfg, params=params, latents=latents)


def requantize(model: VitModel, names=None) -> None:
    """Re-derive ternary tensors from their latents (in place)."""
    for name in names if names is not None else list(model.latents):
        model.params[name] = quantize_ternary(model.latents[name], name=name)


def dequantized_twin(model: VitModel) -> VitModel:
    """Full-precision model whose weights are the student's ``gamma * codes``."""
    params = {name: model.effective_weight(name).copy() for name in model.names()}
    return VitModel(config=model.config.twin(quantized=False), params=params)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``(B, H, W, C)`` -> ``(B, patches, P*P*C)``; patches row-major."""
    b, h, w, c = images.shape
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)


@dataclass
class _LinearCache:
    x: np.ndarray  # input rows (masked or not, pre-mask values)
    mask: object   # GateMask or None


@dataclass
class ForwardCache:
    sparsity: float
    dtype: type
    patches: np.ndarray
    blocks: list = field(default_factory=list)
    final_ln: tuple = ()
    tokens_pre_norm: np.ndarray | None = None


def _linear(model, name, x, s, counter, cache_list):
    """Gated ternary linear for students, plain linear for teachers."""
    lead = x.shape[:-1]
    x2 = x.reshape(-1, x.shape[-1])
    w = model.params[name + ".weight"]
    bias = model.params[name + ".bias"].astype(x.dtype)
    if isinstance(w, TernaryTensor):
        mask = topk_mask(x2, s)
        y = sparse_ternary_matmul(x2, mask, w, counter, layer=name)
    else:
        mask = None
        y = matmul_ref(x2, w)
        if counter is not None:
            counter.add(name, x2.shape[0] * w.shape[1] * w.shape[0])
    if cache_list is not None:
        cache_list.append(_LinearCache(x=x2, mask=mask))
    return (y + bias).reshape(*lead, -1)


def forward_batch(
    model: VitModel,
    images: np.ndarray,
    s: float = 0.0,
    counter: OpsCounter | None = None,
    keep_cache: bool = False,
    dtype=np.float32,
):
    """Forward a ``(B, H, W, C)`` batch; returns ``(tokens, cache)``.

    ``tokens`` are the final-layer tokens after the last LayerNorm.
    """
    cfg = model.config
    s = check_sparsity(s)
    if not cfg.quantized and s != 0:
        raise UsageError(f"full-precision models run ungated; got s={s}")
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1:] != cfg.image:
        raise DimensionError(f"expected images of shape (B, {', '.join(map(str, cfg.image))}), got {images.shape}")
    images = images.astype(dtype)
    p = {k: (v.astype(dtype) if isinstance(v, np.ndarray) else v) for k, v in model.params.items()}
    b, n, d = images.shape[0], cfg.tokens, cfg.dim

    patches = patchify(images, cfg.patch)
    emb = matmul_ref(patches, p["patch_embed.weight"]) + p["patch_embed.bias"]
    if counter is not None:
        counter.add("patch_embed", b * cfg.num_patches * cfg.patch_dim * d)
    cls = np.broadcast_to(p["cls_token"], (b, 1, d))
    x = np.concatenate([cls, emb], axis=1) + p["pos_embed"]

    cache = ForwardCache(sparsity=s, dtype=dtype, patches=patches) if keep_cache else None
    view = VitModel(config=cfg, params=p)
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        lin = [] if keep_cache else None
        a1, ln1 = layernorm(x, p[pre + "norm1.weight"], p[pre + "norm1.bias"])
        qkv = _linear(view, pre + "attn.qkv", a1, s, counter, lin)
        att, att_cache = attention(qkv, cfg.heads)
        if counter is not None:
            counter.add(pre + "attn.scores", b * n * n * d)
            counter.add(pre + "attn.values", b * n * n * d)
        x2 = x + _linear(view, pre + "attn.proj", att, s, counter, lin)
        a2, ln2 = layernorm(x2, p[pre + "norm2.weight"], p[pre + "norm2.bias"])
        h = _linear(view, pre + "mlp.fc1", a2, s, counter, lin)
        g = gelu(h)
        x3 = x2 + _linear(view, pre + "mlp.fc2", g, s, counter, lin)
        if keep_cache:
            cache.blocks.append(dict(ln1=ln1, ln2=ln2, att=att_cache, h=h, lin=lin))
        x = x3
    out, lnf = layernorm(x, p["norm.weight"], p["norm.bias"])
    if keep_cache:
        cache.final_ln = lnf
    return out, cache


@dataclass(frozen=True, eq=False)
class Descriptor:
    values: np.ndarray

    def __post_init__(self):
        norm = float(np.linalg.norm(self.values.astype(np.float64)))
        if abs(norm - 1.0) > 1e-5:
            raise NumericError(f"descriptor norm {norm} is not 1")


def cls_descriptors(tokens: np.ndarray) -> np.ndarray:
    """Unit-norm CLS rows of a ``(B, N, D)`` token batch."""
    cls = tokens[:, 0, :]
    if np.any(np.all(cls == 0, axis=-1)):
        raise NumericError("CLS token is the zero vector; descriptor undefined")
    desc, _ = l2_normalize(cls)
    return desc


def descriptor_head_cls(tokens: np.ndarray) -> Descriptor:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise DimensionError(f"expected (N, D) tokens with N >= 1, got {tokens.shape}")
    return Descriptor(cls_descriptors(tokens[None])[0])


def forward(model: VitModel, image: np.ndarray, s: float = 0.0, counter: OpsCounter | None = None):
    """Single-image forward; returns ``(tokens (N, D), Descriptor)``."""
    image = as_dense(image)
    tokens, _ = forward_batch(model, image[None], s, counter)
    return tokens[0], descriptor_head_cls(tokens[0])

