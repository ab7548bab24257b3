"""Edit-distance alignment, WER/CER, and rare-word error reporting."""

from __future__ import annotations

from dataclasses import dataclass, field

from .core import UsageError, normalize_text


@dataclass
class AlignResult:
    subs: int
    dels: int
    ins: int
    pairs: list[tuple[str | None, str | None]]

    @property
    def errors(self) -> int:
        return self.subs + self.dels + self.ins


def edit_align(ref: list, hyp: list) -> AlignResult:
    """Minimal-cost alignment with unit costs.

    Backtrace ties prefer substitution over insertion over deletion, so the
    alignment is deterministic.
    """
    n, m = len(ref), len(hyp)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dist[i][0] = i
    for j in range(1, m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        row, prev = dist[i], dist[i - 1]
        ri = ref[i - 1]
        for j in range(1, m + 1):
            sub = prev[j - 1] + (ri != hyp[j - 1])
            ins = row[j - 1] + 1
            dele = prev[j] + 1
            row[j] = min(sub, ins, dele)
    pairs: list[tuple[str | None, str | None]] = []
    subs = dels = ins_count = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i][j] == dist[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            pairs.append((ref[i - 1], hyp[j - 1]))
            subs += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and dist[i][j] == dist[i][j - 1] + 1:
            pairs.append((None, hyp[j - 1]))
            ins_count += 1
            j -= 1
        else:
            pairs.append((ref[i - 1], None))
            dels += 1
            i -= 1
    pairs.reverse()
    return AlignResult(subs, dels, ins_count, pairs)


def _tokens(text: str, unit: str) -> list[str]:
    norm = normalize_text(text)
    if unit == "word":
        return norm.split()
    if unit == "char":
        return list(norm)
    raise UsageError(f"unknown unit {unit!r}; use 'word' or 'char'")


def corpus_error_rate(pairs, unit: str) -> float:
    """100 * (S + D + I) / N micro-averaged over the corpus."""
    if not pairs:
        raise UsageError("corpus_error_rate needs at least one (ref, hyp) pair")
    errors = 0
    total = 0
    for ref, hyp in pairs:
        r, h = _tokens(ref, unit), _tokens(hyp, unit)
        errors += edit_align(r, h).errors
        total += len(r)
    if total == 0:
        raise UsageError("total reference length is zero")
    return 100.0 * errors / total


@dataclass
class RareWordTable:
    counts: dict[str, int]
    threshold: int

    def is_rare(self, word: str) -> bool:
        return self.counts.get(word, 0) < self.threshold


def rare_table(train_transcripts, threshold: int = 20) -> RareWordTable:
    """Whitespace-token counts over the training transcripts; rare means count < threshold."""
    if threshold < 1:
        raise UsageError("rarity threshold must be at least 1")
    counts: dict[str, int] = {}
    for text in train_transcripts:
        for word in normalize_text(text).split():
            counts[word] = counts.get(word, 0) + 1
    return RareWordTable(counts, threshold)


@dataclass
class RareMetrics:
    rare_cer: float | None
    rare_sub_rate: float | None
    rare_per: float | None
    n_rare: int


def rare_word_metrics(pairs, table: RareWordTable, g2p: dict[str, list[str]] | None = None) -> RareMetrics:
    """Character-level error rate and exact-match failure rate over rare reference words.

    Each rare reference word is charged against whatever the word-level
    alignment paired it with (its substitution partner, or nothing when
    deleted).  With a grapheme-to-phoneme table, a phoneme error rate is
    reported as well; words missing from the table fall back to their letters.
    """
    char_err = char_len = 0
    phon_err = phon_len = 0
    n_rare = matched = 0
    for ref, hyp in pairs:
        align = edit_align(_tokens(ref, "word"), _tokens(hyp, "word"))
        for ref_w, hyp_w in align.pairs:
            if ref_w is None or not table.is_rare(ref_w):
                continue
            n_rare += 1
            partner = hyp_w or ""
            char_err += edit_align(list(ref_w), list(partner)).errors
            char_len += len(ref_w)
            matched += ref_w == hyp_w
            if g2p is not None:
                rp = g2p.get(ref_w, list(ref_w))
                hp = g2p.get(partner, list(partner)) if partner else []
                phon_err += edit_align(rp, hp).errors
                phon_len += len(rp)
    if n_rare == 0:
        return RareMetrics(None, None, None, 0)
    rare_per = 100.0 * phon_err / phon_len if g2p is not None and phon_len > 0 else None
    return RareMetrics(
        100.0 * char_err / char_len,
        100.0 * (1.0 - matched / n_rare),
        rare_per,
        n_rare,
    )


@dataclass
class UtteranceScore:
    utt_id: str
    wer: float
    cer: float
    subs: int
    dels: int
    ins: int
    ref_words: int


@dataclass
class EvalReport:
    wer: float
    cer: float
    per: float | None
    rare: RareMetrics | None
    subs: int
    dels: int
    ins: int
    ref_words: int
    per_utterance: list[UtteranceScore] = field(default_factory=list)


def _per_rate(pairs, g2p: dict[str, list[str]]) -> float:
    errors = total = 0
    for ref, hyp in pairs:
        rp = [p for w in _tokens(ref, "word") for p in g2p.get(w, list(w))]
        hp = [p for w in _tokens(hyp, "word") for p in g2p.get(w, list(w))]
        errors += edit_align(rp, hp).errors
        total += len(rp)
    if total == 0:
        raise UsageError("total reference phoneme length is zero")
    return 100.0 * errors / total


def evaluate_corpus(
    refs: dict[str, str],
    hyps: dict[str, str],
    table: RareWordTable | None = None,
    g2p: dict[str, list[str]] | None = None,
) -> EvalReport:
    """Corpus-level report; refs and hyps must cover identical utterance ids."""
    missing = sorted(set(refs) ^ set(hyps))
    if missing:
        raise UsageError(f"reference/hypothesis id mismatch, first missing: {missing[0]!r}")
    if not refs:
        raise UsageError("no utterances to evaluate")
    ids = sorted(refs)
    pairs = [(refs[i], hyps[i]) for i in ids]
    subs = dels = ins = ref_words = 0
    per_utt = []
    for utt_id in ids:
        r, h = refs[utt_id], hyps[utt_id]
        align = edit_align(_tokens(r, "word"), _tokens(h, "word"))
        n = len(_tokens(r, "word"))
        cer = corpus_error_rate([(r, h)], "char")
        per_utt.append(
            UtteranceScore(
                utt_id,
                100.0 * align.errors / n if n else 0.0,
                cer,
                align.subs,
                align.dels,
                align.ins,
                n,
            )
        )
        subs += align.subs
        dels += align.dels
        ins += align.ins
        ref_words += n
    report = EvalReport(
        wer=corpus_error_rate(pairs, "word"),
        cer=corpus_error_rate(pairs, "char"),
        per=_per_rate(pairs, g2p) if g2p is not None else None,
        rare=rare_word_metrics(pairs, table, g2p) if table is not None else None,
        subs=subs,
        dels=dels,
        ins=ins,
        ref_words=ref_words,
        per_utterance=per_utt,
    )
    return report


REPORT_FIELDS = (
    "wer",
    "cer",
    "per",
    "rare_cer",
    "rare_sub_rate",
    "rare_per",
    "n_rare",
    "subs",
    "dels",
    "ins",
    "ref_words",
)


def format_report(report: EvalReport, per_utterance: bool = False) -> str:
    """Tab-separated key/value summary, optionally followed by a per-utterance block.

    Field order is fixed (see REPORT_FIELDS); metrics without a defined value
    are written as 'absent'.
    """
    def fmt(val):
        return "absent" if val is None else repr(val)

    rare = report.rare
    rows = [
        ("wer", report.wer),
        ("cer", report.cer),
        ("per", report.per),
        ("rare_cer", rare.rare_cer if rare else None),
        ("rare_sub_rate", rare.rare_sub_rate if rare else None),
        ("rare_per", rare.rare_per if rare else None),
        ("n_rare", rare.n_rare if rare else None),
        ("subs", report.subs),
        ("dels", report.dels),
        ("ins", report.ins),
        ("ref_words", report.ref_words),
    ]
    lines = [f"{key}\t{fmt(val)}" for key, val in rows]
    if per_utterance:
        lines.append("")
        lines.append("id\twer\tcer\tsubs\tdels\tins\tref_words")
        for u in report.per_utterance:
            lines.append(
                f"{u.utt_id}\t{u.wer!r}\t{u.cer!r}\t{u.subs}\t{u.dels}\t{u.ins}\t{u.ref_words}"
            )
    return "\n".join(lines) + "\n"
