"""Ternary weight quantization: thresholding, per-tensor scale, packed trits.

Weights map to {-1, 0, +1} by sign and threshold tau, with an optional
per-tensor scale alpha recovering magnitude. Trits are stored 4 per byte
(2-bit codes), which is the checkpoint wire format and the input format of
the packed kernels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import DegenerateInputError, ShapeError, TritFormatError

# 2-bit trit codes; 11 is reserved and must never appear.
_CODE_ZERO = 0
_CODE_PLUS = 1
_CODE_MINUS = 2

_CODE_TO_VALUE = np.array([0, 1, -1, 127], dtype=np.int8)  # 127 marks invalid


@dataclass(frozen=True)
class QuantConfig:
    threshold_mode: str = "absmean_fraction"   # or "fixed"
    threshold_fraction: float = 0.5
    fixed_tau: float = 0.0
    scale_mode: str = "absmean"                # or "none"

    def __post_init__(self) -> None:
        if self.threshold_mode not in ("absmean_fraction", "fixed"):
            raise ValueError(f"unknown threshold_mode {self.threshold_mode!r}")
        if self.scale_mode not in ("absmean", "none"):
            raise ValueError(f"unknown scale_mode {self.scale_mode!r}")
        if not (0.0 < self.threshold_fraction <= 1.0):
            raise ValueError("threshold_fraction must be in (0, 1]")
        if self.fixed_tau < 0.0:
            raise ValueError("fixed_tau must be >= 0")


class TernaryTensor:
    """Packed ternary matrix with a per-tensor scale.

    ``trits`` is the flat packed buffer (4 trits/byte over row-major entry
    order). The expanded +-1/0 matrix is cached lazily because both the
    dense reference path and the encoder reuse it heavily.
    """

    __slots__ = ("rows", "cols", "trits", "scale", "_matrix")

    def __init__(self, rows: int, cols: int, trits: bytes, scale: float = 1.0):
        n = rows * cols
        expected = (n + 3) // 4
        buf = np.frombuffer(bytes(trits), dtype=np.uint8)
        if buf.size != expected:
            raise ShapeError(f"packed length {buf.size}, expected {expected}")
        if scale <= 0.0:
            raise ValueError("scale must be positive")
        self.rows = rows
        self.cols = cols
        self.trits = buf
        self.scale = float(scale)
        self._matrix = None

    @property
    def shape(self):
        return (self.rows, self.cols)

    def trit_matrix(self) -> np.ndarray:
        """Expanded int8 matrix of {-1, 0, +1} values (cached)."""
        if self._matrix is None:
            flat = unpack_trits(self.trits, self.rows * self.cols)
            self._matrix = flat.reshape(self.rows, self.cols)
        return self._matrix

    def packed_bytes(self) -> bytes:
        return self.trits.tobytes()

    def storage_bytes(self) -> int:
        # packed buffer + one float64 scale + rows/cols counts
        return self.trits.size + 16


def pack_trits(values) -> bytes:
    """Pack a {-1, 0, +1} sequence into 2-bit codes, 4 per byte.

    Trit i occupies bits [2i mod 8, 2i mod 8 + 1] of byte i // 4; the final
    partial byte is zero-padded. Encoding: 0 -> 00, +1 -> 01, -1 -> 10.
    """
    v = np.asarray(values, dtype=np.int8).ravel()
    if v.size == 0:
        return b""
    bad = (v < -1) | (v > 1)
    if bad.any():
        raise TritFormatError(f"value {v[bad][0]} outside {{-1, 0, +1}}")
    codes = np.where(v == 1, _CODE_PLUS, np.where(v == -1, _CODE_MINUS, _CODE_ZERO))
    codes = codes.astype(np.uint8)
    pad = (-codes.size) % 4
    if pad:
        codes = np.concatenate([codes, np.zeros(pad, dtype=np.uint8)])
    quads = codes.reshape(-1, 4)
    packed = quads[:, 0] | (quads[:, 1] << 2) | (quads[:, 2] << 4) | (quads[:, 3] << 6)
    return packed.tobytes()


def unpack_trits(buf, n: int) -> np.ndarray:
    """Inverse of pack_trits; returns int8 values in {-1, 0, +1}."""
    b = np.frombuffer(bytes(buf) if not isinstance(buf, np.ndarray) else buf.tobytes(),
                      dtype=np.uint8)
    if b.size * 4 < n:
        raise ShapeError(f"buffer holds {b.size * 4} trits, {n} requested")
    codes = np.empty((b.size, 4), dtype=np.uint8)
    codes[:, 0] = b & 3
    codes[:, 1] = (b >> 2) & 3
    codes[:, 2] = (b >> 4) & 3
    codes[:, 3] = (b >> 6) & 3
    codes = codes.ravel()[:n]
    if (codes == 3).any():
        raise TritFormatError("reserved code 11 encountered")
    return _CODE_TO_VALUE[codes]


def _threshold(w: np.ndarray, cfg: QuantConfig) -> float:
    if cfg.threshold_mode == "fixed":
        return float(cfg.fixed_tau)
    absmean = float(np.abs(w).mean())
    if absmean == 0.0:
        raise DegenerateInputError("all-zero matrix in absmean threshold mode")
    return cfg.threshold_fraction * absmean


def quantize(w: np.ndarray, cfg: QuantConfig = QuantConfig()) -> TernaryTensor:
    """Ternary quantization: sign(w) where |w| > tau, else 0.

    Ties (|w| == tau) quantize to zero (strict inequality). In absmean scale
    mode, alpha is the mean |w| over the surviving (nonzero-trit) entries,
    which minimizes the Frobenius perturbation for the fixed trit pattern.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeError("quantize expects a 2-D weight matrix")
    if not np.isfinite(w).all():
        raise ValueError("weights must be finite")
    tau = _threshold(w, cfg)
    mask = np.abs(w) > tau
    trits = np.where(mask, np.sign(w), 0.0).astype(np.int8)
    if cfg.scale_mode == "absmean":
        if np.abs(w).sum() == 0.0:
            raise DegenerateInputError("all-zero matrix in absmean scale mode")
        # Support may still be empty for a large fixed tau; fall back to 1.
        scale = float(np.abs(w[mask]).mean()) if mask.any() else 1.0
    else:
        scale = 1.0
    return TernaryTensor(w.shape[0], w.shape[1], pack_trits(trits), scale)


def dequantize(t: TernaryTensor) -> np.ndarray:
    """Realize Q(w) in real arithmetic: entry = scale * trit."""
    return t.scale * t.trit_matrix().astype(np.float64)


@dataclass(frozen=True)
class PerturbationReport:
    delta_norm: float   # ||Q(w) - w||_F
    theta_norm: float   # ||w||_F
    epsilon_q: float    # ratio


def measure_perturbation(w: np.ndarray, cfg: QuantConfig = QuantConfig()) -> PerturbationReport:
    """Measured quantization perturbation ratio ||Q(w) - w|| / ||w||."""
    w = np.asarray(w, dtype=np.float64)
    theta_norm = float(np.linalg.norm(w))
    if theta_norm == 0.0:
        raise DegenerateInputError("zero-norm weight matrix")
    delta = dequantize(quantize(w, cfg)) - w
    delta_norm = float(np.linalg.norm(delta))
    return PerturbationReport(delta_norm, theta_norm, delta_norm / theta_norm)
