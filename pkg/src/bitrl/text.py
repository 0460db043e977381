"""State-to-text serialization and the word-level tokenizer.

Observations render into fixed templates with 2-decimal fixed-point values.
Numeric literals tokenize into exactly two tokens: a signed-integer-part
token and a hundredths token, so even a 17-dimensional state fits in the
15-40 token range while preserving the 0.01 serialization resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import ShapeError

MAX_TOKENS = 64          # context cap; longer inputs truncate
_INT_RANGE = 12          # signed integer-part tokens cover -12 .. 12

PAD = "<pad>"
UNK = "<unk>"
_INT_OVERFLOW_POS = "n+big"
_INT_OVERFLOW_NEG = "n-big"


@dataclass(frozen=True)
class SerializationTemplate:
    env_id: str
    template: str      # str.format slots {0}, {1}, ... one per obs dimension
    dims: int


TEMPLATES = {
    "cartpole": SerializationTemplate(
        "cartpole",
        "cart position {0} velocity {1} pole angle {2} angular velocity {3}", 4),
    "mountaincar": SerializationTemplate(
        "mountaincar", "car position {0} velocity {1}", 2),
    "acrobot": SerializationTemplate(
        "acrobot",
        "link one cos {0} sin {1} link two cos {2} sin {3} "
        "angular velocity one {4} angular velocity two {5}", 6),
    "textgrid": SerializationTemplate(
        "textgrid", "agent row {0} column {1} target row {2} column {3}", 4),
}

_INSTRUCTION_WORDS = ["go", "to", "the", "red", "cell", "at"]


def _generic_template(dims: int) -> SerializationTemplate:
    slots = " ".join("{%d}" % i for i in range(dims))
    return SerializationTemplate(f"generic{dims}", "state " + slots, dims)


def get_template(env_id: str) -> SerializationTemplate:
    if env_id in TEMPLATES:
        return TEMPLATES[env_id]
    if env_id.startswith("generic"):
        return _generic_template(int(env_id[len("generic"):]))
    raise KeyError(f"unknown environment id {env_id!r}")


def format_value(v: float) -> str:
    """Fixed-point rendering with 2 decimal places."""
    return f"{float(v):.2f}"


def serialize_state(env_id: str, obs: np.ndarray, instruction: str | None = None) -> str:
    tpl = get_template(env_id)
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim != 1 or obs.shape[0] != tpl.dims:
        raise ShapeError(f"{env_id} expects {tpl.dims}-dim obs, got shape {obs.shape}")
    text = tpl.template.format(*[format_value(v) for v in obs])
    if instruction:
        text = instruction + " " + text
    return text


def _is_number(word: str) -> bool:
    w = word[1:] if word[:1] in "+-" else word
    if not w:
        return False
    parts = w.split(".")
    return 1 <= len(parts) <= 2 and all(p.isdigit() for p in parts if p != "") and w != "."


def _number_tokens(word: str) -> list:
    v = float(word)
    ip = int(abs(v))
    frac = int(round((abs(v) - ip) * 100)) % 100
    if ip > _INT_RANGE:
        int_tok = _INT_OVERFLOW_NEG if v < 0 else _INT_OVERFLOW_POS
    else:
        int_tok = f"n{'-' if v < 0 else ''}{ip}"
    return [int_tok, f"f{frac:02d}"]


class Vocabulary:
    """Fixed vocabulary built from the templates plus number tokens.

    Bijective over non-special tokens; unknown words map to the unk id.
    """

    def __init__(self, extra_words=()):
        words = set()
        for tpl in TEMPLATES.values():
            for w in tpl.template.split():
                if not w.startswith("{"):
                    words.add(w)
        words.update(_INSTRUCTION_WORDS)
        words.add("state")
        words.update(extra_words)
        tokens = [PAD, UNK, _INT_OVERFLOW_POS, _INT_OVERFLOW_NEG]
        tokens += [f"n{i}" for i in range(0, _INT_RANGE + 1)]
        tokens += [f"n-{i}" for i in range(0, _INT_RANGE + 1)]
        tokens += [f"f{i:02d}" for i in range(100)]
        tokens += sorted(words)
        self.id_to_token = tokens
        self.token_to_id = {t: i for i, t in enumerate(tokens)}
        self.pad_id = self.token_to_id[PAD]
        self.unk_id = self.token_to_id[UNK]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def tokenize(self, text: str) -> np.ndarray:
        """Whitespace split; numbers become (signed-int, hundredths) pairs."""
        ids = []
        for word in text.split():
            if _is_number(word):
                for tok in _number_tokens(word):
                    ids.append(self.token_to_id[tok])
            else:
                ids.append(self.token_to_id.get(word, self.unk_id))
        return np.asarray(ids[:MAX_TOKENS], dtype=np.int64)


_DEFAULT_VOCAB: Vocabulary | None = None


def default_vocabulary() -> Vocabulary:
    global _DEFAULT_VOCAB
    if _DEFAULT_VOCAB is None:
        _DEFAULT_VOCAB = Vocabulary()
    return _DEFAULT_VOCAB


def tokenize(text: str) -> np.ndarray:
    return default_vocabulary().tokenize(text)
