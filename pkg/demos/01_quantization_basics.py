"""Ternary quantization walkthrough: threshold, scale, packing, error.

Quantizes a random FP32 matrix to {-1, 0, +1} with a per-tensor absmean
scale, shows what survives the magnitude threshold, packs the trits four to
a byte, and measures the relative perturbation the quantizer introduced.

Run: python3 demos/01_quantization_basics.py
"""

import numpy as np

from bitrl.quantization import (QuantConfig, dequantize, measure_perturbation,
                                pack_trits, quantize, unpack_trits)

rng = np.random.default_rng(0)
w = rng.normal(size=(6, 8)).astype(np.float32)

print("original weights:")
print(np.round(w, 2))

q = quantize(w)
trits = unpack_trits(q.trits, q.rows * q.cols).reshape(q.rows, q.cols)
print("\nternary codes (threshold = half the mean |w|):")
print(trits)
print(f"scale (mean |w| over surviving entries): {q.scale:.4f}")
print(f"sparsity: {np.mean(trits == 0):.1%} of entries zeroed")

print("\ndequantized = trits * scale:")
print(np.round(dequantize(q), 2))

report = measure_perturbation(w)
print(f"\nrelative quantization error eps_Q = ||Q(w) - w|| / ||w|| "
      f"= {report.epsilon_q:.4f}")

# a stricter threshold zeroes more weights and changes the trade-off
strict = measure_perturbation(w, QuantConfig(threshold_fraction=1.0))
print(f"with threshold = mean |w| instead: eps_Q = {strict.epsilon_q:.4f}")

# packing: 4 trits per byte, 16x smaller than FP32
packed = pack_trits([1, -1, 0, 1])
print(f"\npacked [+1, -1, 0, +1] -> byte 0x{packed[0]:02x}")
print(f"storage: {w.nbytes} bytes FP32 -> {q.trits.size} bytes packed "
      f"(+16 for scale and shape)")
