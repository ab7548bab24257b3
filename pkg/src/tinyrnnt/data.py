"""Corpus generation, persistence, and splitting.

The generator manufactures the phenomenon under study at desk scale: word
sequences drawn from a skewed distribution over common words with occasional
rare-word insertions, and per-character acoustic frames that are informative
(a fixed random embedding per character plus Gaussian noise), so a
well-trained acoustic side can recover characters while the label side
overfits frequent spellings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import (
    UsageError,
    Vocabulary,
    derive_seed,
    normalize_text,
)


@dataclass(frozen=True)
class Utterance:
    id: str
    features: np.ndarray
    transcript: str


@dataclass(frozen=True)
class CorpusSpec:
    chars: str
    common_words: tuple[str, ...]
    rare_words: tuple[str, ...]
    utterances: int
    words_per_utt: tuple[int, int]
    zipf_s: float = 1.1
    frames_per_char: int = 3
    noise_sigma: float = 0.3
    seed: int = 0
    rare_prob: float = 0.08
    d_feat: int = 8
    domain_tags: dict[str, tuple[str, ...]] | None = None

    def __post_init__(self):
        if not self.common_words or not self.chars:
            raise UsageError("spec needs a character inventory and common words")
        if set(self.common_words) & set(self.rare_words):
            raise UsageError("common and rare word lists must be disjoint")
        inventory = set(self.chars)
        for word in tuple(self.common_words) + tuple(self.rare_words):
            if not word or set(word) - inventory:
                raise UsageError(f"word {word!r} is not spellable from the character inventory")
        lo, hi = self.words_per_utt
        if not 1 <= lo <= hi:
            raise UsageError("words_per_utt range must satisfy 1 <= lo <= hi")
        if self.utterances < 1:
            raise UsageError("utterance count must be positive")
        if self.frames_per_char < 1:
            raise UsageError("frames_per_char must be at least 1")
        if self.noise_sigma < 0 or not 0.0 <= self.rare_prob <= 1.0:
            raise UsageError("noise_sigma must be >= 0 and rare_prob in [0, 1]")
        if self.domain_tags is not None:
            known = set(self.common_words) | set(self.rare_words)
            for tag, words in self.domain_tags.items():
                unknown = set(words) - known
                if unknown:
                    raise UsageError(f"domain {tag!r} tags unknown words {sorted(unknown)}")


def build_vocab(spec: CorpusSpec) -> Vocabulary:
    seen = dict.fromkeys(spec.chars)
    return Vocabulary.from_chars([" "] + list(seen))


def char_embeddings(spec: CorpusSpec, vocab: Vocabulary) -> dict[str, np.ndarray]:
    """One fixed embedding per vocabulary character, derived from the spec seed."""
    rng = np.random.default_rng(derive_seed(spec.seed, "char-embed"))
    return {tok: rng.normal(size=spec.d_feat) for tok in vocab.tokens[1:]}


def features_for(text: str, embeds: dict[str, np.ndarray], spec: CorpusSpec, rng) -> np.ndarray:
    rows = []
    for ch in text:
        base = embeds[ch]
        for _ in range(spec.frames_per_char):
            noise = rng.normal(size=spec.d_feat) * spec.noise_sigma if spec.noise_sigma > 0 else 0.0
            rows.append(base + noise)
    return np.asarray(rows)


def gen_corpus(spec: CorpusSpec) -> list[Utterance]:
    """Sample utterances and their frames deterministically from the spec seed."""
    vocab = build_vocab(spec)
    embeds = char_embeddings(spec, vocab)
    rng = np.random.default_rng(derive_seed(spec.seed, "corpus"))
    ranks = np.arange(1, len(spec.common_words) + 1, dtype=np.float64)
    zipf_p = ranks ** -spec.zipf_s
    zipf_p /= zipf_p.sum()
    lo, hi = spec.words_per_utt
    utts = []
    for n in range(spec.utterances):
        n_words = int(rng.integers(lo, hi + 1))
        words = []
        for _ in range(n_words):
            if spec.rare_words and rng.random() < spec.rare_prob:
                words.append(spec.rare_words[int(rng.integers(len(spec.rare_words)))])
            else:
                words.append(spec.common_words[int(rng.choice(len(zipf_p), p=zipf_p))])
        transcript = normalize_text(" ".join(words))
        utts.append(
            Utterance(f"utt{n:05d}", features_for(transcript, embeds, spec, rng), transcript)
        )
    return utts


def save_corpus(utts, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt in utts:
            fh.write(
                json.dumps(
                    {
                        "id": utt.id,
                        "transcript": utt.transcript,
                        "features": utt.features.tolist(),
                    }
                )
            )
            fh.write("\n")


def load_corpus(path) -> list[Utterance]:
    utts = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                utt = Utterance(
                    rec["id"], np.asarray(rec["features"], dtype=np.float64), rec["transcript"]
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise UsageError(f"{path}: malformed corpus record on line {lineno}: {exc}") from exc
            if utt.id in seen:
                raise UsageError(f"{path}: duplicate utterance id {utt.id!r} on line {lineno}")
            seen.add(utt.id)
            utts.append(utt)
    return utts


def split_corpus(
    utts,
    fractions,
    seed: int,
    by_domain: str | None = None,
    domain_tags: dict[str, tuple[str, ...]] | None = None,
):
    """(train, dev, test) split, random by default.

    With by_domain, every utterance containing one of that domain's words is
    placed in test and the remaining utterances are split train/dev with the
    first two fractions renormalized.
    """
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise UsageError("fractions must be three non-negative values summing to 1")
    rng = np.random.default_rng(derive_seed(seed, "split"))
    if by_domain is not None:
        if not domain_tags or by_domain not in domain_tags:
            raise UsageError(f"unknown domain tag {by_domain!r}")
        held = set(domain_tags[by_domain])
        test = [u for u in utts if held & set(u.transcript.split())]
        rest = [u for u in utts if not (held & set(u.transcript.split()))]
        mass = fr[0] + fr[1]
        cut = round(len(rest) * (fr[0] / mass)) if mass > 0 else len(rest)
        order = rng.permutation(len(rest))
        train = [rest[i] for i in sorted(order[:cut])]
        dev = [rest[i] for i in sorted(order[cut:])]
        return train, dev, test
    order = rng.permutation(len(utts))
    n_train = round(len(utts) * fr[0])
    n_dev = round(len(utts) * fr[1])
    train = [utts[i] for i in sorted(order[:n_train])]
    dev = [utts[i] for i in sorted(order[n_train:n_train + n_dev])]
    test = [utts[i] for i in sorted(order[n_train + n_dev:])]
    return train, dev, test


def default_spec(seed: int = 0, utterances: int = 500, noise_sigma: float = 0.3) -> CorpusSpec:
    """Shipped word inventory: two in-domain word groups, one holdout group, rare spellings.

    Holdout and rare words share prefixes with frequent words so the label
    side of a trained model pushes toward the familiar continuation.
    """
    d1 = ("bandar", "saltu", "minore", "detol", "korima", "ulendo", "trebo", "askena")
    d2 = ("bandol", "salki", "minato", "derun", "kobalt", "ulsane", "tremid", "askor")
    d3 = ("bandik", "salme", "minesk", "detra", "kolun", "ulrik", "tresko", "asil")
    rare = ("bandeluk", "salvitor", "minotek", "deskarn", "koltrane", "ultimor")
    return CorpusSpec(
        chars="abdeiklmnorstuv",
        common_words=d1 + d2 + d3,
        rare_words=rare,
        utterances=utterances,
        words_per_utt=(2, 3),
        zipf_s=1.1,
        frames_per_char=3,
        noise_sigma=noise_sigma,
        seed=seed,
        rare_prob=0.05,
        d_feat=8,
        domain_tags={"d1": d1, "d2": d2, "d3": d3},
    )
