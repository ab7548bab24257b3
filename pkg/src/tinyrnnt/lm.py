"""External character n-gram language model with add-k smoothing.

Used only by the shallow-fusion and density-ratio decoding baselines.  Events
are conditioned on the previous order-1 tokens (padded with a begin sentinel)
and include an end-of-sentence outcome, so every context normalizes over
v_lm + 1 outcomes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import BLANK_ID, UsageError, Vocabulary, validate_labels

BEGIN = -1
END = -2

LM_FORMAT_VERSION = 1


@dataclass
class NGramLM:
    order: int
    add_k: float
    v_lm: int  # emitting tokens, blank excluded
    vocab_hash: str = ""
    counts: dict[tuple[int, ...], dict[int, int]] = field(default_factory=dict)
    totals: dict[tuple[int, ...], int] = field(default_factory=dict)

    def __post_init__(self):
        if self.order < 1:
            raise UsageError("n-gram order must be at least 1")
        if self.add_k <= 0:
            raise UsageError("add_k smoothing constant must be positive")
        if self.v_lm < 1:
            raise UsageError("LM vocabulary must contain at least one token")


def _context(history: tuple[int, ...], order: int) -> tuple[int, ...]:
    if order == 1:
        return ()
    padded = (BEGIN,) * (order - 1) + tuple(history)
    return padded[-(order - 1):]


def train_ngram(corpus, order: int, add_k: float, vocab: Vocabulary) -> NGramLM:
    """Count n-grams over label sequences, with begin/end sentinels."""
    lm = NGramLM(order=order, add_k=add_k, v_lm=vocab.size - 1, vocab_hash=vocab.content_hash())
    for sentence in corpus:
        sentence = validate_labels(sentence, vocab.size)
        for pos in range(len(sentence) + 1):
            ctx = _context(sentence[:pos], order)
            tok = sentence[pos] if pos < len(sentence) else END
            by_tok = lm.counts.setdefault(ctx, {})
            by_tok[tok] = by_tok.get(tok, 0) + 1
            lm.totals[ctx] = lm.totals.get(ctx, 0) + 1
    return lm


def lm_logprob(lm: NGramLM, token: int, history) -> float:
    """Add-k smoothed log P(token | last order-1 history tokens); always finite.

    token may be END to score sentence termination.
    """
    if token == BLANK_ID:
        raise UsageError("external LMs have no blank symbol")
    ctx = _context(tuple(history), lm.order)
    count = lm.counts.get(ctx, {}).get(token, 0)
    total = lm.totals.get(ctx, 0)
    return float(np.log((count + lm.add_k) / (total + lm.add_k * (lm.v_lm + 1))))


def save_lm(lm: NGramLM, path) -> None:
    doc = {
        "format_version": LM_FORMAT_VERSION,
        "order": lm.order,
        "add_k": lm.add_k,
        "v_lm": lm.v_lm,
        "vocab_hash": lm.vocab_hash,
        "counts": [
            {"context": list(ctx), "tokens": sorted(by_tok.items())}
            for ctx, by_tok in sorted(lm.counts.items())
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_lm(path) -> NGramLM:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"LM file {path} is not valid structured text: {exc}") from exc
    if doc.get("format_version") != LM_FORMAT_VERSION:
        raise UsageError(f"unsupported LM format version {doc.get('format_version')!r}")
    lm = NGramLM(
        order=doc["order"], add_k=doc["add_k"], v_lm=doc["v_lm"], vocab_hash=doc["vocab_hash"]
    )
    for row in doc["counts"]:
        ctx = tuple(row["context"])
        lm.counts[ctx] = {int(tok): int(cnt) for tok, cnt in row["tokens"]}
        lm.totals[ctx] = sum(lm.counts[ctx].values())
    return lm
