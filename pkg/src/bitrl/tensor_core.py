"""Dense FP linear algebra, reductions, and reproducible RNG streams.

This is the full-precision reference path shared by every other module.
All matrices are row-major numpy arrays; reductions rely on numpy's
pairwise summation, which keeps long-vector error growth logarithmic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class DegenerateInputError(ValueError):
    """Input is outside the operation's valid domain (e.g. all-zero tensor)."""


class TritFormatError(ValueError):
    """Packed trit buffer contains the reserved code 11 or a bad alphabet value."""


@dataclass
class RngStream:
    """Counter-based random stream keyed by (seed, stream_id).

    Backed by Philox, so identical keys reproduce identical draws across
    platforms and runs. ``derive`` creates an independent child stream
    deterministically, used to hand out per-worker / per-episode streams.
    """

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        key = np.array([self.seed & 0xFFFFFFFFFFFFFFFF,
                        self.stream_id & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def derive(self, child_id: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id * 1_000_003 + child_id + 1)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Standard matrix product with an explicit dimension check."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def matvec(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    x = np.asarray(x)
    if a.ndim != 2 or x.ndim != 1:
        raise ShapeError("matvec expects a matrix and a vector")
    if a.shape[1] != x.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {x.shape}")
    return a @ x


def spectral_norm_upper_bound(a: np.ndarray) -> float:
    """Upper bound on the largest singular value.

    Uses sigma_max(A) <= sqrt(||A||_1 * ||A||_inf), which is a true bound for
    every matrix (unlike a power-method estimate, which converges from below).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError("expected a 2-D matrix")
    if a.size == 0:
        return 0.0
    abs_a = np.abs(a)
    norm_inf = float(abs_a.sum(axis=1).max())  # max row sum
    norm_one = float(abs_a.sum(axis=0).max())  # max col sum
    return float(np.sqrt(norm_one * norm_inf))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-subtraction)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def entropy(dist: np.ndarray) -> float:
    """Shannon entropy -sum(p ln p) with 0 ln 0 := 0.

    Raises on inputs that are not a probability vector.
    """
    p = np.asarray(dist, dtype=np.float64)
    if p.ndim != 1:
        raise ShapeError("entropy expects a 1-D distribution")
    if np.any(p < -1e-12):
        raise DegenerateInputError("negative probability entry")
    total = float(p.sum())
    if abs(total - 1.0) > 1e-6:
        raise DegenerateInputError(f"distribution sums to {total}, not 1")
    pos = p[p > 0.0]
    return float(-(pos * np.log(pos)).sum())


def entropy_of_rows(p: np.ndarray) -> np.ndarray:
    """Row-wise entropy for a batch of distributions (no validation)."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0.0, p * np.log(p), 0.0)
    return -t.sum(axis=-1)
