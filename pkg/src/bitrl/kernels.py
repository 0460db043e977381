"""Integer-only forward kernels for packed ternary weights.

The deployment path quantizes activations to int8 (per-vector absmax),
accumulates in 64-bit integers by adding/subtracting activation values as
the 2-bit weight codes dictate (decoded branch-free with bit masks, no
multiplies), and applies the combined weight/activation scale once at the
end. A dense FP32 matvec built with the same plain-loop discipline serves
as the speed baseline; correctness oracles live in tensor_core.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np
from numba import njit

from .quantization import TernaryTensor, dequantize
from .tensor_core import ShapeError, matvec

MAX_KERNEL_COLS = 1 << 24  # keeps |accumulator| < 127 * 2^24 < 2^63


@dataclass(frozen=True)
class QuantizedActivations:
    values: np.ndarray   # int8, each in [-127, 127]
    act_scale: float
    len: int


def quantize_activations(x: np.ndarray) -> QuantizedActivations:
    """Per-vector absmax quantization to int8.

    act_scale = max|x| / 127; values round half away from zero. The all-zero
    vector maps to zeros with act_scale = 1 (documented convention).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("expected a vector")
    if not np.isfinite(x).all():
        raise ValueError("activations must be finite")
    amax = float(np.abs(x).max()) if x.size else 0.0
    if amax == 0.0:
        return QuantizedActivations(np.zeros(x.size, dtype=np.int8), 1.0, x.size)
    scale = amax / 127.0
    scaled = x / scale
    rounded = np.copysign(np.floor(np.abs(scaled) + 0.5), scaled)
    values = np.clip(rounded, -127, 127).astype(np.int8)
    return QuantizedActivations(values, scale, x.size)


@njit(cache=True)
def _ternary_matvec_packed(packed, cols, xq, out):
    rows = packed.shape[0]
    pcols = packed.shape[1]
    one = np.int64(1)
    for r in range(rows):
        # four independent accumulator chains (one per trit lane) keep the
        # adds pipelined instead of serialized on a single accumulator
        a0 = np.int64(0)
        a1 = np.int64(0)
        a2 = np.int64(0)
        a3 = np.int64(0)
        for pb in range(pcols):
            b = np.int64(packed[r, pb])
            j = pb * 4
            v0 = np.int64(xq[j])
            v1 = np.int64(xq[j + 1])
            v2 = np.int64(xq[j + 2])
            v3 = np.int64(xq[j + 3])
            # branch-free select: +v for code 01, -v for code 10
            a0 += (v0 & -(b & one)) - (v0 & -((b >> 1) & one))
            a1 += (v1 & -((b >> 2) & one)) - (v1 & -((b >> 3) & one))
            a2 += (v2 & -((b >> 4) & one)) - (v2 & -((b >> 5) & one))
            a3 += (v3 & -((b >> 6) & one)) - (v3 & -((b >> 7) & one))
        out[r] = a0 + a1 + a2 + a3


@njit(cache=True)
def _dense_matvec_f32(w, x, out):
    rows, cols = w.shape
    for r in range(rows):
        acc = np.float32(0.0)
        for c in range(cols):
            acc += w[r, c] * x[c]
        out[r] = acc


def _packed_rows(w: TernaryTensor) -> np.ndarray:
    if w.cols % 4 != 0:
        raise ShapeError("packed kernel requires cols divisible by 4")
    return w.trits.reshape(w.rows, w.cols // 4)


def ternary_matvec(w: TernaryTensor, x: QuantizedActivations) -> np.ndarray:
    """Integer-accumulated matvec over packed trits and int8 activations."""
    if w.cols != x.len:
        raise ShapeError(f"weight cols {w.cols} != activation len {x.len}")
    if w.cols > MAX_KERNEL_COLS:
        raise ShapeError("cols exceeds the accumulator-safety cap 2^24")
    acc = np.empty(w.rows, dtype=np.int64)
    _ternary_matvec_packed(_packed_rows(w), w.cols, x.values, acc)
    return acc.astype(np.float64) * (w.scale * x.act_scale)


def ternary_matvec_reference(w: TernaryTensor, x: np.ndarray) -> np.ndarray:
    """Oracle path: dequantize then exact dense product."""
    x = np.asarray(x, dtype=np.float64)
    if w.cols != x.shape[0]:
        raise ShapeError(f"weight cols {w.cols} != vector len {x.shape[0]}")
    return matvec(dequantize(w), x)


def dense_matvec(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Plain-loop FP32 matvec; the speed baseline for the ternary kernel."""
    w = np.ascontiguousarray(w, dtype=np.float32)
    x = np.ascontiguousarray(x, dtype=np.float32)
    if w.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"shape mismatch: {w.shape} x {x.shape}")
    out = np.empty(w.shape[0], dtype=np.float32)
    _dense_matvec_f32(w, x, out)
    return out


@dataclass(frozen=True)
class KernelBenchReport:
    dims: tuple
    median_ns: float
    p95_ns: float
    bytes_touched: int
    speedup_vs_dense: float
    dense_median_ns: float = 0.0

    def to_json(self) -> str:
        return json.dumps({
            "rows": self.dims[0],
            "cols": self.dims[1],
            "median_ns": self.median_ns,
            "p95_ns": self.p95_ns,
            "speedup": self.speedup_vs_dense,
        })


def _time_loop(fn, iters: int, warmup: int = 10):
    for _ in range(warmup):
        fn()
    samples = np.empty(iters, dtype=np.float64)
    for i in range(iters):
        t0 = time.perf_counter_ns()
        fn()
        samples[i] = time.perf_counter_ns() - t0
    samples.sort()
    median = float(np.median(samples))
    p95 = float(samples[min(iters - 1, int(np.ceil(0.95 * iters)) - 1)])
    return median, max(p95, median)


def bench_matvec(dims, iters: int = 1000, seed: int = 0):
    """Median/p95 latency of the packed ternary path vs the dense FP32 path.

    Single-threaded, monotonic clock, 10 warmup iterations. The ternary
    timing includes activation quantization.
    """
    if iters < 100:
        raise ValueError("iters must be >= 100")
    from .quantization import QuantConfig, quantize
    from .tensor_core import RngStream

    reports = []
    for rows, cols in dims:
        rng = RngStream(seed, rows * 100_000 + cols)
        pad_cols = cols + ((-cols) % 4)
        w = rng.normal(size=(rows, pad_cols))
        if pad_cols != cols:
            w[:, cols:] = 0.0
        t = quantize(w, QuantConfig())
        wf = np.ascontiguousarray(dequantize(t), dtype=np.float32)
        x = np.ascontiguousarray(rng.normal(size=pad_cols), dtype=np.float32)
        packed = _packed_rows(t)
        acc = np.empty(rows, dtype=np.int64)
        out = np.empty(rows, dtype=np.float32)

        def tern():
            xq = quantize_activations(x.astype(np.float64))
            _ternary_matvec_packed(packed, pad_cols, xq.values, acc)

        def dense():
            _dense_matvec_f32(wf, x, out)

        t_med, t_p95 = _time_loop(tern, iters)
        d_med, _ = _time_loop(dense, iters)
        bytes_touched = packed.size + pad_cols + rows * 8
        reports.append(KernelBenchReport(
            dims=(rows, cols),
            median_ns=t_med,
            p95_ns=t_p95,
            bytes_touched=bytes_touched,
            speedup_vs_dense=d_med / t_med if t_med > 0 else 0.0,
            dense_median_ns=d_med,
        ))
    return reports
