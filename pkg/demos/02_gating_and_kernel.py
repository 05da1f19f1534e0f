"""
Top-k activation gating and the sparse ternary kernel
=====================================================

The gate keeps the largest-magnitude entries of each activation row. The
kernel then multiplies only the kept entries with the ternary weights, and an
operation counter records exactly how much work that was.
"""

import numpy as np

from ternvpr import OpsCounter, Prng, quantize_ternary, randn, sparse_ternary_matmul, topk_mask

x = np.array([[0.1, -2.0, 0.3, 1.5]], dtype=np.float32)
mask = topk_mask(x, 0.5)
print("kept columns at s=0.5:", mask.kept)
print("masked row:", x * mask.dense())

# 17 tokens of width 64 through a 64 -> 256 ternary projection
prng = Prng(1)
tokens = randn(prng, (17, 64))
weight = quantize_ternary(randn(prng, (256, 64)) * 0.02)
dense = OpsCounter()
reference = sparse_ternary_matmul(tokens, topk_mask(tokens, 0.0), weight, dense)
for s in (0.0, 0.2, 0.4, 0.6):
    counter = OpsCounter()
    y = sparse_ternary_matmul(tokens, topk_mask(tokens, s), weight, counter)
    drift = np.linalg.norm(y - reference) / np.linalg.norm(reference)
    print(f"s={s:.1f}  MACs={counter.macs:6d} ({counter.macs / dense.macs:.2f} of dense)  output drift {drift:.3f}")
