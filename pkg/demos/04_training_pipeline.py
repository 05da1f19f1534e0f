"""
Distillation and fine-tuning on synthetic places
================================================

A small full-precision teacher learns place descriptors, a ternary student is
distilled from its tokens under a rising sparsity range, and the last two
blocks plus the final norm are fine-tuned for retrieval. Runs in about a
minute on one core.
"""

from ternvpr import ModelConfig, Prng, init_model
from ternvpr.config import SyntheticDatasetConfig, TrainConfig
from ternvpr.retrieval import ImageSet, gen_synthetic_dataset, sweep
from ternvpr.train import FreezeMask, default_freeze_mask, train_distill, train_finetune

cfg = ModelConfig()  # 32x32 images, 8x8 patches, width 64, four blocks
train = gen_synthetic_dataset(SyntheticDatasetConfig(num_places=100, queries_per_place=7), seed=101)
held_out = gen_synthetic_dataset(SyntheticDatasetConfig(num_places=50), seed=7)
images = ImageSet.concat(train.references, train.queries)

teacher = init_model(cfg.twin(quantized=False), Prng(0))
recs = train_finetune(teacher, images, TrainConfig(steps=300), FreezeMask.all(teacher), seed=1)
print(f"teacher multi-similarity loss {recs[0].loss:.3f} -> {recs[-1].loss:.3f}")

student = init_model(cfg, Prng(1))
recs = train_distill(student, teacher, images, TrainConfig(steps=200), seed=2)
print(f"distillation loss {recs[0].loss:.4f} -> {recs[-1].loss:.4f}, final sampled s={recs[-1].sparsity:.2f}")

before = sweep(student, held_out, [0.0])[0].recall_at[1]
train_finetune(student, images, TrainConfig(steps=300, learning_rate=5e-4), default_freeze_mask(student), seed=3)
for row in sweep(student, held_out, [0.0, 0.3, 0.6]):
    print(f"s={row.sparsity:.1f} recall@1={row.recall_at[1]:.2f} recall@5={row.recall_at[5]:.2f} MACs={row.macs_per_query}")
print(f"recall@1 at s=0 before fine-tuning: {before:.2f} (chance {1 / 50:.2f})")
