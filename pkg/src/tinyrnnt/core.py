"""Shared domain types and log-domain numeric primitives.

Everything downstream (loss lattices, beam search, discounting) works with
double-precision log-probabilities; the helpers here are the only place the
underlying numerics live.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

NEG_INF = float("-inf")

BLANK_ID = 0
BLANK_TOKEN = "<b>"
SPACE_ESCAPE = "<sp>"

Labels = tuple[int, ...]


class UsageError(ValueError):
    """The caller violated an API contract (bad arguments, malformed files)."""


class NumericError(RuntimeError):
    """A numeric invariant failed (non-finite loss, denormalized distribution)."""


class OovError(UsageError):
    def __init__(self, char: str, position: int):
        super().__init__(
            f"character {char!r} at position {position} is not in the vocabulary"
        )
        self.char = char
        self.position = position


def derive_seed(master: int, *tags) -> int:
    """Stable 63-bit seed for (master, purpose) so distinct uses never share RNG streams."""
    text = str(int(master)) + "/" + "/".join(str(t) for t in tags)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def log_sum_exp(values: Sequence[float]) -> float:
    """log(sum(exp(v))) with max-subtraction; safe for magnitudes up to ~700."""
    if len(values) == 0:
        raise UsageError("log_sum_exp requires at least one value")
    arr = np.asarray(values, dtype=np.float64)
    m = float(arr.max())
    if m == NEG_INF:
        return NEG_INF
    return m + float(np.log(np.exp(arr - m).sum()))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class LogDistribution:
    """A normalized distribution over the vocabulary, stored as log-probabilities."""

    logp: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "logp", np.asarray(self.logp, dtype=np.float64))

    @property
    def size(self) -> int:
        return self.logp.shape[0]

    def validate(self, tol: float = 1e-9) -> None:
        if np.isnan(self.logp).any() or (self.logp == np.inf).any():
            raise NumericError("log-probabilities must be real or -inf")
        total = np.exp(log_sum_exp(self.logp))
        if abs(total - 1.0) > tol:
            raise NumericError(f"distribution mass {total!r} differs from 1 by > {tol}")


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token inventory; index 0 is always the blank symbol."""

    tokens: tuple[str, ...]
    blank_index: int = BLANK_ID

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.blank_index != BLANK_ID:
            raise UsageError("blank must sit at index 0")
        if len(self.tokens) < 2:
            raise UsageError("vocabulary needs blank plus at least one token")
        if self.tokens[0] != BLANK_TOKEN:
            raise UsageError(f"token 0 must be the blank marker {BLANK_TOKEN!r}")
        if len(set(self.tokens)) != len(self.tokens):
            raise UsageError("vocabulary tokens must be unique")

    @classmethod
    def from_chars(cls, chars: Iterable[str]) -> "Vocabulary":
        out = [BLANK_TOKEN]
        for ch in chars:
            if len(ch) != 1:
                raise UsageError(f"emitting tokens must be single characters, got {ch!r}")
            out.append(ch)
        return cls(tuple(out))

    @property
    def size(self) -> int:
        return len(self.tokens)

    @cached_property
    def _index(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(self.tokens)}

    def id_of(self, token: str) -> int | None:
        return self._index.get(token)

    def content_hash(self) -> str:
        blob = "\x00".join(self.tokens).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def save_vocab(vocab: Vocabulary, path) -> None:
    lines = []
    for tok in vocab.tokens:
        lines.append(SPACE_ESCAPE if tok == " " else tok)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_vocab(path) -> Vocabulary:
    with open(path, "r", encoding="utf-8") as fh:
        raw = [line.rstrip("\n") for line in fh if line.rstrip("\n") != ""]
    if not raw:
        raise UsageError(f"vocabulary file {path} is empty")
    if raw[0] != BLANK_TOKEN:
        raise UsageError(f"line 0 of {path} must be {BLANK_TOKEN!r}, got {raw[0]!r}")
    tokens = [BLANK_TOKEN]
    for tok in raw[1:]:
        tokens.append(" " if tok == SPACE_ESCAPE else tok)
    return Vocabulary(tuple(tokens))


def normalize_text(text: str) -> str:
    """Lowercase and collapse whitespace runs to single spaces."""
    return re.sub(r"\s+", " ", text.lower()).strip()


def encode_transcript(text: str, vocab: Vocabulary) -> Labels:
    norm = normalize_text(text)
    if not norm:
        raise UsageError("transcript is empty after normalization")
    ids = []
    for pos, ch in enumerate(norm):
        idx = vocab.id_of(ch)
        if idx is None or idx == vocab.blank_index:
            raise OovError(ch, pos)
        ids.append(idx)
    return tuple(ids)


def decode_labels(ids: Sequence[int], vocab: Vocabulary) -> str:
    out = []
    for idx in ids:
        if not 0 <= idx < vocab.size or idx == vocab.blank_index:
            raise UsageError(f"label id {idx} is not a valid emitting token")
        out.append(vocab.tokens[idx])
    return "".join(out)


def validate_labels(ids: Sequence[int], vocab_size: int) -> Labels:
    ids = tuple(int(i) for i in ids)
    for idx in ids:
        if not 0 <= idx < vocab_size or idx == BLANK_ID:
            raise UsageError(f"label id {idx} out of range or blank")
    return ids


def validate_features(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise UsageError(f"features must be a (T>=1, d) matrix, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise UsageError("features contain non-finite values")
    return x
