"""Integer-only inference: int8 activations through the packed trit kernel.

The deployment path never multiplies inside the matvec loop: activations are
absmax-quantized to int8, each 2-bit weight code adds or subtracts the
activation via bit masks, and one float multiply applies the combined scale
at the end. This script checks the kernel against the dequantized reference
and benchmarks it against a plain-loop FP32 matvec.

Run: python3 demos/02_integer_kernel.py
"""

import numpy as np

from bitrl.kernels import (bench_matvec, quantize_activations, ternary_matvec,
                           ternary_matvec_reference)
from bitrl.quantization import quantize

rng = np.random.default_rng(1)
w = quantize(rng.normal(size=(8, 16)))
x = rng.normal(size=16)

qa = quantize_activations(x)
print(f"activation scale = max|x| / 127 = {qa.act_scale:.5f}")
print(f"int8 activations: {qa.values.tolist()}")

y_int = ternary_matvec(w, qa)
x_deq = qa.values.astype(np.float64) * qa.act_scale
y_ref = ternary_matvec_reference(w, x_deq)
print(f"\ninteger kernel:        {np.round(y_int, 4)}")
print(f"dequantized reference: {np.round(y_ref, 4)}")
print(f"max abs difference:    {np.abs(y_int - y_ref).max():.2e}")

# every output is an exact integer multiple of the combined scale
combined = w.scale * qa.act_scale
multiples = y_int / combined
print(f"outputs / (weight scale * act scale) are integers: "
      f"{np.allclose(multiples, np.round(multiples))}")

print("\nbenchmark (median over 200 iterations):")
print(f"{'dims':>12} {'ternary us':>12} {'dense us':>10} {'speedup':>8}")
for r in bench_matvec([(256, 256), (1024, 1024)], iters=200, seed=0):
    print(f"{r.dims[0]}x{r.dims[1]:<7} {r.median_ns / 1e3:>12.1f} "
          f"{r.dense_median_ns / 1e3:>10.1f} {r.speedup_vs_dense:>7.2f}x")
