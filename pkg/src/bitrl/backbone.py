"""Frozen transformer state encoder with ternary linear projections.

The encoder is randomly initialized and frozen: it stands in for the
pretrained backbone, which is out of scope at desk scale. Every linear
projection (attention q/k/v/o and both FFN mats) is a TernaryTensor;
embeddings, positional encodings, and layer-norm parameters stay FP32.
``build_backbone`` also returns the pre-quantization FP shadow used by the
bound-verification suites and the hybrid-precision critic.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .quantization import QuantConfig, TernaryTensor, quantize
from .tensor_core import RngStream, ShapeError, softmax
from .text import MAX_TOKENS, Vocabulary, default_vocabulary

LN_EPS = 1e-5

LINEAR_NAMES = ("wq", "wk", "wv", "wo", "w1", "w2")


@dataclass(frozen=True)
class BackboneConfig:
    layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    ffn_dim: int = 512

    def __post_init__(self) -> None:
        if not (2 <= self.layers <= 6):
            raise ValueError("layers must be in [2, 6]")
        if not (64 <= self.d_model <= 256):
            raise ValueError("d_model must be in [64, 256]")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must divide evenly into heads")


def _weight_matrix(w) -> np.ndarray:
    """Dense float32 view of a linear weight (ternary or FP shadow)."""
    if isinstance(w, TernaryTensor):
        return (w.trit_matrix().astype(np.float32) * np.float32(w.scale))
    return w


@dataclass
class EncoderLayer:
    wq: object
    wk: object
    wv: object
    wo: object
    w1: object
    w2: object
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    def mat(self, name: str) -> np.ndarray:
        m = self._cache.get(name)
        if m is None:
            m = np.ascontiguousarray(_weight_matrix(getattr(self, name)))
            self._cache[name] = m
        return m


@dataclass
class BackboneModel:
    cfg: BackboneConfig
    vocab: Vocabulary
    embeddings: np.ndarray          # (vocab, d) float32
    positional: np.ndarray          # (MAX_TOKENS, d) float32
    layers: list
    final_ln_g: np.ndarray
    final_ln_b: np.ndarray
    frozen: bool = True

    def linear_weights(self):
        """Yields (name, weight) for every linear projection, in order."""
        for i, layer in enumerate(self.layers):
            for name in LINEAR_NAMES:
                yield f"layer{i}.{name}", getattr(layer, name)

    def parameter_count(self) -> int:
        n = self.embeddings.size
        n += 2 * self.final_ln_g.size
        for layer in self.layers:
            for name in LINEAR_NAMES:
                w = getattr(layer, name)
                n += w.rows * w.cols if isinstance(w, TernaryTensor) else w.size
            n += layer.ln1_g.size + layer.ln1_b.size
            n += layer.ln2_g.size + layer.ln2_b.size
        return n

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.embeddings.tobytes())
        h.update(self.final_ln_g.tobytes())
        h.update(self.final_ln_b.tobytes())
        for _, w in self.linear_weights():
            if isinstance(w, TernaryTensor):
                h.update(w.packed_bytes())
                h.update(np.float64(w.scale).tobytes())
            else:
                h.update(np.ascontiguousarray(w).tobytes())
        for layer in self.layers:
            for v in (layer.ln1_g, layer.ln1_b, layer.ln2_g, layer.ln2_b):
                h.update(v.tobytes())
        return h.hexdigest()


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc.astype(np.float32)


def build_backbone(cfg: BackboneConfig, rng: RngStream,
                   quant_cfg: QuantConfig = QuantConfig(),
                   vocab: Vocabulary | None = None):
    """Builds the frozen ternary encoder plus its FP-shadow twin.

    Linear weights draw iid Gaussian at 1/sqrt(fan_in); the ternary copy
    is produced by the default quantizer. Both models share embeddings,
    positional encodings, and layer-norm parameters.
    """
    vocab = vocab or default_vocabulary()
    d = cfg.d_model
    emb = rng.normal(scale=1.0, size=(len(vocab), d)).astype(np.float32)
    pos = sinusoidal_positions(MAX_TOKENS, d)

    def make_layers(ternary: bool, fp_weights):
        layers = []
        for fp in fp_weights:
            ws = {name: (quantize(fp[name], quant_cfg) if ternary else
                         fp[name].astype(np.float32))
                  for name in LINEAR_NAMES}
            layers.append(EncoderLayer(
                **ws,
                ln1_g=np.ones(d, dtype=np.float32), ln1_b=np.zeros(d, dtype=np.float32),
                ln2_g=np.ones(d, dtype=np.float32), ln2_b=np.zeros(d, dtype=np.float32)))
        return layers

    fp_weights = []
    for _ in range(cfg.layers):
        fp_weights.append({
            "wq": rng.normal(scale=d ** -0.5, size=(d, d)),
            "wk": rng.normal(scale=d ** -0.5, size=(d, d)),
            "wv": rng.normal(scale=d ** -0.5, size=(d, d)),
            "wo": rng.normal(scale=d ** -0.5, size=(d, d)),
            "w1": rng.normal(scale=d ** -0.5, size=(cfg.ffn_dim, d)),
            "w2": rng.normal(scale=cfg.ffn_dim ** -0.5, size=(d, cfg.ffn_dim)),
        })

    fg = np.ones(d, dtype=np.float32)
    fb = np.zeros(d, dtype=np.float32)
    ternary_model = BackboneModel(cfg, vocab, emb, pos, make_layers(True, fp_weights),
                                  fg.copy(), fb.copy())
    shadow_model = BackboneModel(cfg, vocab, emb, pos, make_layers(False, fp_weights),
                                 fg.copy(), fb.copy())
    return ternary_model, shadow_model


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g + b


def encode(model: BackboneModel, tokens: np.ndarray) -> np.ndarray:
    """h = mean-pooled pre-norm transformer encoding of the token sequence."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ShapeError("encode requires a non-empty 1-D token sequence")
    if not model.frozen:
        raise ValueError("backbone must be frozen")
    cfg = model.cfg
    T = min(tokens.size, MAX_TOKENS)
    tokens = tokens[:T]
    x = model.embeddings[tokens] + model.positional[:T]
    dh = cfg.d_model // cfg.n_heads
    inv_sqrt_dh = np.float32(1.0 / np.sqrt(dh))
    for layer in model.layers:
        u = _layer_norm(x, layer.ln1_g, layer.ln1_b)
        q = (u @ layer.mat("wq").T).reshape(T, cfg.n_heads, dh)
        k = (u @ layer.mat("wk").T).reshape(T, cfg.n_heads, dh)
        v = (u @ layer.mat("wv").T).reshape(T, cfg.n_heads, dh)
        scores = np.einsum("thd,shd->hts", q, k) * inv_sqrt_dh
        attn = softmax(scores, axis=-1)
        mixed = np.einsum("hts,shd->thd", attn, v).reshape(T, cfg.d_model)
        x = x + (mixed.astype(np.float32) @ layer.mat("wo").T)
        u = _layer_norm(x, layer.ln2_g, layer.ln2_b)
        hidden = np.maximum(u @ layer.mat("w1").T, 0.0)
        x = x + hidden @ layer.mat("w2").T
    x = _layer_norm(x, model.final_ln_g, model.final_ln_b)
    return x.mean(axis=0).astype(np.float64)
