"""Trainable FP policy and value heads with exact manual gradients.

Two-layer tanh MLPs (d -> 256 -> 128 -> out) are the only trainable
parameters in the system; the backbone never receives a gradient. Gradients
are analytic and checked against central finite differences in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import RngStream, ShapeError, softmax

HIDDEN_1 = 256
HIDDEN_2 = 128

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")


@dataclass
class HeadParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w3.shape[0]

    def tensors(self):
        return [(n, getattr(self, n)) for n in PARAM_NAMES]

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.tensors())

    def copy(self) -> "HeadParams":
        return HeadParams(*(getattr(self, n).copy() for n in PARAM_NAMES))


@dataclass
class GradientBuffer:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    def tensors(self):
        return [(n, getattr(self, n)) for n in PARAM_NAMES]

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float((t * t).sum()) for _, t in self.tensors())))

    def is_finite(self) -> bool:
        return all(np.isfinite(t).all() for _, t in self.tensors())

    @staticmethod
    def zeros_like(params: HeadParams) -> "GradientBuffer":
        return GradientBuffer(*(np.zeros_like(getattr(params, n)) for n in PARAM_NAMES))


def _orthogonal(rng: RngStream, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_head(in_dim: int, out_dim: int, rng: RngStream,
              output_scale: float) -> HeadParams:
    """Orthogonal hidden layers (gain sqrt(2)); output scaled by
    0.01 for the policy head (near-uniform initial policy) or 1.0 for value."""
    g = np.sqrt(2.0)
    return HeadParams(
        w1=_orthogonal(rng, HIDDEN_1, in_dim, g),
        b1=np.zeros(HIDDEN_1),
        w2=_orthogonal(rng, HIDDEN_2, HIDDEN_1, g),
        b2=np.zeros(HIDDEN_2),
        w3=_orthogonal(rng, out_dim, HIDDEN_2, output_scale),
        b3=np.zeros(out_dim),
    )


def init_policy_head(in_dim: int, n_actions: int, rng: RngStream) -> HeadParams:
    if n_actions < 2:
        raise ShapeError("policy head needs at least 2 actions")
    return init_head(in_dim, n_actions, rng, 0.01)


def init_value_head(in_dim: int, rng: RngStream) -> HeadParams:
    return init_head(in_dim, 1, rng, 1.0)


@dataclass
class ForwardCache:
    h: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    out: np.ndarray


def forward(params: HeadParams, h: np.ndarray) -> ForwardCache:
    """Batched forward pass; h is (n, d) or (d,)."""
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    if h.shape[1] != params.in_dim:
        raise ShapeError(f"head expects dim {params.in_dim}, got {h.shape[1]}")
    a1 = np.tanh(h @ params.w1.T + params.b1)
    a2 = np.tanh(a1 @ params.w2.T + params.b2)
    out = a2 @ params.w3.T + params.b3
    return ForwardCache(h, a1, a2, out)


def policy_forward(params: HeadParams, h: np.ndarray) -> np.ndarray:
    """Action distribution softmax(g(h)); shape follows the input batch."""
    logits = forward(params, h).out
    probs = softmax(logits, axis=-1)
    return probs[0] if np.asarray(h).ndim == 1 else probs


def value_forward(params: HeadParams, h: np.ndarray) -> np.ndarray:
    out = forward(params, h).out[:, 0]
    return float(out[0]) if np.asarray(h).ndim == 1 else out


def backward(params: HeadParams, cache: ForwardCache,
             upstream: np.ndarray, with_input_grad: bool = False):
    """Exact gradients of sum(upstream * out) w.r.t. head parameters.

    ``upstream`` is (n, out_dim). Returns a GradientBuffer (summed over the
    batch); optionally also d/dh. The backbone never sees these gradients.
    """
    if cache is None:
        raise ValueError("missing forward cache")
    upstream = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if upstream.shape != cache.out.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != output {cache.out.shape}")
    d3 = upstream
    gw3 = d3.T @ cache.a2
    gb3 = d3.sum(axis=0)
    d2 = (d3 @ params.w3) * (1.0 - cache.a2 ** 2)
    gw2 = d2.T @ cache.a1
    gb2 = d2.sum(axis=0)
    d1 = (d2 @ params.w2) * (1.0 - cache.a1 ** 2)
    gw1 = d1.T @ cache.h
    gb1 = d1.sum(axis=0)
    grads = GradientBuffer(gw1, gb1, gw2, gb2, gw3, gb3)
    if with_input_grad:
        return grads, d1 @ params.w1
    return grads


@dataclass
class AdamState:
    """Adam moments for one head (beta1=0.9, beta2=0.999, eps=1e-8)."""
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def for_params(params: HeadParams) -> "AdamState":
        return AdamState(
            m=[np.zeros_like(t) for _, t in params.tensors()],
            v=[np.zeros_like(t) for _, t in params.tensors()],
        )


@dataclass(frozen=True)
class UpdateInfo:
    applied: bool
    grad_norm: float
    clipped: bool


def apply_update(params: HeadParams, grads: GradientBuffer, lr: float,
                 max_norm: float, state: AdamState) -> UpdateInfo:
    """Global-norm gradient clip followed by one Adam step (in place).

    max_norm <= 0 disables clipping. A non-finite gradient skips the update
    and reports it (divergence guard).
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    if not grads.is_finite():
        return UpdateInfo(applied=False, grad_norm=float("nan"), clipped=False)
    norm = grads.global_norm()
    scale = 1.0
    clipped = False
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        clipped = True
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    for i, (name, g) in enumerate(grads.tensors()):
        g = g * scale
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * (g * g)
        m_hat = state.m[i] / bias1
        v_hat = state.v[i] / bias2
        getattr(params, name)[...] -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return UpdateInfo(applied=True, grad_norm=norm, clipped=clipped)
