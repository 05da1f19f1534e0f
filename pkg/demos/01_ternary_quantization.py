"""
Ternary weights
===============

Absolute-mean quantization maps a float matrix to codes in {-1, 0, +1}
plus one scale, and the codes pack four to a byte.
"""

import numpy as np

from ternvpr import Prng, dequantize, quantize_ternary, randn
from ternvpr.ternary import pack_codes, unpack_codes

# a single row worked by hand: gamma = mean(|w|) = 0.625
w = np.array([[0.5, -1.5, 0.25, -0.25]], dtype=np.float32)
t = quantize_ternary(w)
print("gamma:", t.gamma)
print("codes:", t.code_matrix())
print("dequantized:", dequantize(t))

# codes are stored two bits each: 00 -> 0, 01 -> +1, 10 -> -1
packed = pack_codes([1, -1, 0, 0])
print("packed byte: 0x%02x" % packed[0])
print("round trip:", unpack_codes(packed, 4))

# a realistic weight matrix, and what quantization costs in accuracy
w = randn(Prng(0), (192, 64)) * 0.02
t = quantize_ternary(w)
err = np.abs(dequantize(t) - w)
print(f"\n192x64 layer: gamma={t.gamma:.5f}, zero codes {np.mean(t.code_matrix() == 0):.1%}")
print(f"mean |error| {err.mean():.5f}, storage {t.nbytes} bytes vs {w.nbytes} as float32")

# re-quantizing a quantized tensor keeps the codes; only the scale moves
t2 = quantize_ternary(dequantize(t))
print("codes unchanged after re-quantizing:", np.array_equal(t2.code_matrix(), t.code_matrix()))
