"""Ternary-weight, top-k gated tiny ViT for place-recognition descriptors.

Modules: ``tensor`` (substrate, PRNG), ``ternary`` (quantizer and codec),
``gate`` (top-k masks, sparsity schedule), ``kernels`` (sparse ternary
matmul, MAC accounting), ``model``/``modelio`` (ViT, model files),
``train`` (backward, distillation, fine-tuning), ``retrieval`` (synthetic
data, search, Recall@k, sweeps) and ``cli``.
"""

from .config import ModelConfig, RunConfig, SyntheticDatasetConfig, TrainConfig
from .gate import GateMask, ScheduleConfig, apply_mask, keep_count, topk_mask
from .kernels import OpsCounter, count_model_ops, dense_ref, sparse_ternary_matmul
from .model import Descriptor, VitModel, descriptor_head_cls, forward, init_model
from .modelio import load_model, save_model
from .tensor import Prng, matmul_ref, randn
from .ternary import QuantConfig, TernaryTensor, dequantize, quantize_ternary

__version__ = "0.1.0"

__all__ = [
    "Descriptor",
    "GateMask",
    "ModelConfig",
    "OpsCounter",
    "Prng",
    "QuantConfig",
    "RunConfig",
    "ScheduleConfig",
    "SyntheticDatasetConfig",
    "TernaryTensor",
    "TrainConfig",
    "VitModel",
    "apply_mask",
    "count_model_ops",
    "dense_ref",
    "dequantize",
    "descriptor_head_cls",
    "forward",
    "init_model",
    "keep_count",
    "load_model",
    "matmul_ref",
    "quantize_ternary",
    "randn",
    "save_model",
    "sparse_ternary_matmul",
    "topk_mask",
]
