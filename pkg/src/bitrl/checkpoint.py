"""BTRL binary checkpoint format.

Layout (little-endian throughout):
  magic "BTRL" | u32 format version | u8 has_vocab |
  [vocab: u32 count, then per token u16 len + utf-8 bytes] |
  u32 tensor count, then per tensor:
    u16 name len + name bytes | u8 rank | u32 dims[rank] |
    u8 dtype tag (0 = FP32 raw, 1 = ternary packed) |
    [f64 scale, ternary only] | payload bytes.

Ternary payloads are the packed trit buffer, bit-exact as produced by
pack_trits.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .quantization import TernaryTensor
from .text import Vocabulary

MAGIC = b"BTRL"
VERSION = 1
DTYPE_FP32 = 0
DTYPE_TERNARY = 1


class CheckpointError(ValueError):
    """Corrupt or mismatched checkpoint data."""


def _write_str(out: bytearray, s: str, fmt: str) -> None:
    b = s.encode("utf-8")
    out += struct.pack(fmt, len(b))
    out += b


def save_checkpoint(path, tensors: dict, vocab_tokens=None) -> None:
    """tensors maps name -> float32 ndarray or TernaryTensor."""
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<B", 1 if vocab_tokens is not None else 0)
    if vocab_tokens is not None:
        out += struct.pack("<I", len(vocab_tokens))
        for tok in vocab_tokens:
            _write_str(out, tok, "<H")
    out += struct.pack("<I", len(tensors))
    for name, t in tensors.items():
        _write_str(out, name, "<H")
        if isinstance(t, TernaryTensor):
            out += struct.pack("<B", 2)
            out += struct.pack("<II", t.rows, t.cols)
            out += struct.pack("<B", DTYPE_TERNARY)
            out += struct.pack("<d", t.scale)
            out += t.packed_bytes()
        else:
            arr = np.ascontiguousarray(t, dtype=np.float32)
            out += struct.pack("<B", arr.ndim)
            out += struct.pack("<" + "I" * arr.ndim, *arr.shape)
            out += struct.pack("<B", DTYPE_FP32)
            out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals


def load_checkpoint(path):
    """Returns (tensors dict, vocab token list or None)."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic; not a BTRL checkpoint")
    version = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    vocab_tokens = None
    if r.unpack("<B"):
        count = r.unpack("<I")
        vocab_tokens = []
        for _ in range(count):
            n = r.unpack("<H")
            vocab_tokens.append(r.take(n).decode("utf-8"))
    n_tensors = r.unpack("<I")
    tensors = {}
    for _ in range(n_tensors):
        n = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        rank = r.unpack("<B")
        dims = [r.unpack("<I") for _ in range(rank)]
        dtype = r.unpack("<B")
        if dtype == DTYPE_TERNARY:
            if rank != 2:
                raise CheckpointError("ternary tensors must be rank 2")
            scale = r.unpack("<d")
            rows, cols = dims
            payload = r.take((rows * cols + 3) // 4)
            tensors[name] = TernaryTensor(rows, cols, payload, scale)
        elif dtype == DTYPE_FP32:
            size = int(np.prod(dims)) if dims else 1
            payload = r.take(size * 4)
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        else:
            raise CheckpointError(f"unknown dtype tag {dtype}")
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after tensor directory")
    return tensors, vocab_tokens


# --- model <-> tensor-dict packing ---

def backbone_to_tensors(model) -> dict:
    t = {
        "backbone.embeddings": model.embeddings,
        "backbone.final_ln_g": model.final_ln_g,
        "backbone.final_ln_b": model.final_ln_b,
    }
    for i, layer in enumerate(model.layers):
        for name in ("wq", "wk", "wv", "wo", "w1", "w2"):
            t[f"backbone.layer{i}.{name}"] = getattr(layer, name)
        t[f"backbone.layer{i}.ln1_g"] = layer.ln1_g
        t[f"backbone.layer{i}.ln1_b"] = layer.ln1_b
        t[f"backbone.layer{i}.ln2_g"] = layer.ln2_g
        t[f"backbone.layer{i}.ln2_b"] = layer.ln2_b
    return t


def backbone_from_tensors(tensors: dict, cfg, vocab: Vocabulary):
    from .backbone import BackboneModel, EncoderLayer, sinusoidal_positions
    from .text import MAX_TOKENS
    layers = []
    for i in range(cfg.layers):
        p = f"backbone.layer{i}."
        try:
            layers.append(EncoderLayer(
                wq=tensors[p + "wq"], wk=tensors[p + "wk"],
                wv=tensors[p + "wv"], wo=tensors[p + "wo"],
                w1=tensors[p + "w1"], w2=tensors[p + "w2"],
                ln1_g=tensors[p + "ln1_g"], ln1_b=tensors[p + "ln1_b"],
                ln2_g=tensors[p + "ln2_g"], ln2_b=tensors[p + "ln2_b"]))
        except KeyError as e:
            raise CheckpointError(f"missing backbone tensor {e}") from e
    return BackboneModel(
        cfg, vocab, tensors["backbone.embeddings"],
        sinusoidal_positions(MAX_TOKENS, cfg.d_model),
        layers, tensors["backbone.final_ln_g"], tensors["backbone.final_ln_b"])


def head_to_tensors(prefix: str, params) -> dict:
    return {f"{prefix}.{n}": t for n, t in params.tensors()}


def head_from_tensors(prefix: str, tensors: dict):
    from .heads import PARAM_NAMES, HeadParams
    try:
        return HeadParams(*(tensors[f"{prefix}.{n}"].astype(np.float64)
                            for n in PARAM_NAMES))
    except KeyError as e:
        raise CheckpointError(f"missing head tensor {e}") from e
