"""Alignment-length synchronous beam search with adaptive LM discounting.

Hypotheses at step i share alignment length i = t + u.  Blank extensions
always add the raw blank log-probability and consume a frame; non-blank
extensions add the active strategy's token score, advance the predictor, and
update the rolling-rarity value.  A hypothesis finalizes when it takes the
blank out of the last frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .core import BLANK_ID, LogDistribution, UsageError, validate_features
from .discount import DiscountConfig, RollingState, d_adapt, kl_divergence, score_disc, update_roll
from .lm import NGramLM, lm_logprob
from .model import ModelParams, PredictorState, joint_dist, pn_start, pn_step, tn_forward

STRATEGIES = ("baseline", "adaptlmd", "static_discount", "shallow_fusion", "density_ratio")

# strategies that evaluate the implicit LM and keep the rolling state live
_ILM_STRATEGIES = ("adaptlmd", "static_discount")


@dataclass(frozen=True)
class ExternalLMs:
    src: NGramLM | None = None
    tgt: NGramLM | None = None


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "baseline"
    beam_width: int = 4
    max_symbols: int | None = None  # None -> 2 * frame count
    nbest: int = 1
    discount: DiscountConfig | None = None
    fusion_mu: float = 0.0
    fusion_nu: float = 0.0
    trace: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise UsageError(
                f"unknown strategy {self.strategy!r}; valid strategies: {', '.join(STRATEGIES)}"
            )
        if self.beam_width < 1:
            raise UsageError("beam_width must be at least 1")
        if self.nbest < 1:
            raise UsageError("nbest must be at least 1")
        if self.max_symbols is not None and self.max_symbols < 0:
            raise UsageError("max_symbols must be non-negative")
        if not (math.isfinite(self.fusion_mu) and math.isfinite(self.fusion_nu)):
            raise UsageError("fusion weights must be finite")
        if self.strategy in _ILM_STRATEGIES and self.discount is None:
            raise UsageError(f"strategy {self.strategy!r} requires a discount configuration")


@dataclass
class BeamEntry:
    labels: tuple[int, ...]
    score: float
    pstate: PredictorState | None
    roll: RollingState
    trace: tuple | None = None  # cons list of step records, newest first


@dataclass
class DecodeResult:
    nbest: list[tuple[tuple[int, ...], float]]
    trace: list[dict] | None = None

    @property
    def best(self) -> tuple[tuple[int, ...], float]:
        return self.nbest[0]


def _require_lms(cfg: DecodeConfig, lms: ExternalLMs | None) -> None:
    if cfg.strategy == "shallow_fusion" and (lms is None or lms.tgt is None):
        raise UsageError("shallow_fusion requires a target-domain LM")
    if cfg.strategy == "density_ratio" and (
        lms is None or lms.tgt is None or lms.src is None
    ):
        raise UsageError("density_ratio requires both source and target LMs")


def extension_score(
    entry: BeamEntry,
    token: int,
    p_rnnt: LogDistribution,
    p_ilm: LogDistribution | None,
    p_iam: LogDistribution | None,
    cfg: DecodeConfig,
    lms: ExternalLMs | None = None,
    kl: float | None = None,
) -> float:
    """Score of extending a hypothesis by one token under the active strategy.

    Blank always scores its raw log-probability.  kl, when provided, reuses a
    node-level divergence already computed for this (t, u) expansion.
    """
    lp = float(p_rnnt.logp[token])
    if token == BLANK_ID:
        return lp
    strat = cfg.strategy
    if strat == "baseline":
        return lp
    if strat == "adaptlmd":
        if kl is None:
            kl = kl_divergence(p_ilm, p_iam)
        d = d_adapt(kl, entry.roll, token)
        return score_disc(lp, float(p_ilm.logp[token]), d, cfg.discount.lam)
    if strat == "static_discount":
        return score_disc(lp, float(p_ilm.logp[token]), 1.0, cfg.discount.lam)
    _require_lms(cfg, lms)
    score = lp + cfg.fusion_nu * lm_logprob(lms.tgt, token, entry.labels)
    if strat == "density_ratio":
        score -= cfg.fusion_mu * lm_logprob(lms.src, token, entry.labels)
    return score


def prune_and_recombine(candidates, width: int):
    """Merge identical label sequences (keep max score and its states), top-width by score.

    Ties are broken by first-seen order, so the result is deterministic under a
    deterministic candidate enumeration.
    """
    if width < 1:
        raise UsageError("beam width must be at least 1")
    best: dict[tuple[int, ...], tuple[int, object]] = {}
    for idx, entry in enumerate(candidates):
        cur = best.get(entry.labels)
        if cur is None:
            best[entry.labels] = (idx, entry)
        elif entry.score > cur[1].score:
            best[entry.labels] = (cur[0], entry)
    ranked = sorted(best.values(), key=lambda pair: (-pair[1].score, pair[0]))
    return [entry for _, entry in ranked[:width]]


def _cons(record, tail):
    return (record, tail)


def _unwind(trace) -> list[dict]:
    out = []
    while trace is not None:
        out.append(trace[0])
        trace = trace[1]
    out.reverse()
    return out


def alsd_decode(
    params: ModelParams,
    x: np.ndarray,
    cfg: DecodeConfig,
    lms: ExternalLMs | None = None,
) -> DecodeResult:
    """Alignment-length synchronous beam decoding of one utterance."""
    x = validate_features(x)
    _require_lms(cfg, lms)
    h = tn_forward(params, x)
    frames = h.shape[0]
    u_max = cfg.max_symbols if cfg.max_symbols is not None else 2 * frames
    v = params.dims.v
    need_ilm = cfg.strategy in _ILM_STRATEGIES
    need_iam = cfg.strategy == "adaptlmd"
    rho = cfg.discount.rho if cfg.discount is not None else 0.0
    ema = cfg.discount.ema if cfg.discount is not None else False
    p_roll0 = cfg.discount.p_roll_init if cfg.discount is not None else 1.0

    root = pn_start(params)
    state_cache: dict[tuple[int, ...], PredictorState] = {(): root}
    ilm_cache: dict[tuple[int, ...], LogDistribution] = {}
    iam_cache: dict[int, LogDistribution] = {}

    beam = [BeamEntry((), 0.0, root, RollingState(p_roll0), None)]
    final: dict[tuple[int, ...], BeamEntry] = {}
    final_order: dict[tuple[int, ...], int] = {}

    for i in range(frames + u_max):
        candidates = []
        for entry in beam:
            u = len(entry.labels)
            t = i - u
            if t >= frames:
                continue
            p_rnnt = joint_dist(params, h[t], entry.pstate.g)

            p_ilm = p_iam = None
            kl = None
            if need_ilm:
                p_ilm = ilm_cache.get(entry.labels)
                if p_ilm is None:
                    p_ilm = joint_dist(params, None, entry.pstate.g)
                    ilm_cache[entry.labels] = p_ilm
            if need_iam:
                p_iam = iam_cache.get(t)
                if p_iam is None:
                    p_iam = joint_dist(params, h[t], None)
                    iam_cache[t] = p_iam
                kl = kl_divergence(p_ilm, p_iam)

            blank_score = float(p_rnnt.logp[BLANK_ID])
            trace = entry.trace
            if cfg.trace:
                trace = _cons(
                    {
                        "type": "step",
                        "i": i,
                        "t": t,
                        "u": u,
                        "kind": "blank",
                        "token": BLANK_ID,
                        "score": blank_score,
                        "log_prnnt": blank_score,
                        "log_pilm": None,
                        "p_ilm": None,
                        "kl": kl,
                        "p_roll_before": entry.roll.p_roll,
                        "p_roll_after": entry.roll.p_roll,
                    },
                    trace,
                )
            blank_child = BeamEntry(
                entry.labels, entry.score + blank_score, entry.pstate, entry.roll, trace
            )
            candidates.append(blank_child)
            if t == frames - 1:
                prev = final.get(entry.labels)
                if prev is None or blank_child.score > prev.score:
                    final[entry.labels] = blank_child
                    final_order.setdefault(entry.labels, len(final_order))

            if u >= u_max:
                continue
            for k in range(v):
                if k == BLANK_ID:
                    continue
                step = extension_score(entry, k, p_rnnt, p_ilm, p_iam, cfg, lms, kl=kl)
                if need_ilm:
                    pk = float(np.exp(p_ilm.logp[k]))
                    roll = update_roll(entry.roll, rho, pk, ema=ema)
                else:
                    pk = None
                    roll = entry.roll
                child_trace = entry.trace
                if cfg.trace:
                    child_trace = _cons(
                        {
                            "type": "step",
                            "i": i,
                            "t": t,
                            "u": u,
                            "kind": "emit",
                            "token": k,
                            "score": step,
                            "log_prnnt": float(p_rnnt.logp[k]),
                            "log_pilm": float(p_ilm.logp[k]) if p_ilm is not None else None,
                            "p_ilm": pk,
                            "kl": kl,
                            "p_roll_before": entry.roll.p_roll,
                            "p_roll_after": roll.p_roll,
                        },
                        child_trace,
                    )
                candidates.append(
                    BeamEntry(entry.labels + (k,), entry.score + step, None, roll, child_trace)
                )
        if not candidates:
            break
        beam = prune_and_recombine(candidates, cfg.beam_width)
        for idx, entry in enumerate(beam):
            if entry.pstate is None:
                st = state_cache.get(entry.labels)
                if st is None:
                    st = pn_step(params, state_cache[entry.labels[:-1]], entry.labels[-1])
                    state_cache[entry.labels] = st
                beam[idx] = replace(entry, pstate=st)

    if not final:
        raise UsageError("no hypothesis finalized; the feature sequence is empty")
    ranked = sorted(final.values(), key=lambda e: (-e.score, final_order[e.labels]))
    nbest = [(e.labels, e.score) for e in ranked[: cfg.nbest]]
    trace_records = _unwind(ranked[0].trace) if cfg.trace else None
    return DecodeResult(nbest, trace_records)


def greedy_decode(params: ModelParams, x: np.ndarray, max_symbols: int) -> DecodeResult:
    """Frame-synchronous argmax decoding; max_symbols caps emissions per frame."""
    if max_symbols < 0:
        raise UsageError("max_symbols must be non-negative")
    x = validate_features(x)
    h = tn_forward(params, x)
    state = pn_start(params)
    labels: list[int] = []
    score = 0.0
    for t in range(h.shape[0]):
        emitted = 0
        while True:
            dist = joint_dist(params, h[t], state.g)
            k = int(np.argmax(dist.logp))
            if k == BLANK_ID:
                score += float(dist.logp[BLANK_ID])
                break
            if emitted >= max_symbols:
                break  # per-frame cap reached; move to the next frame
            score += float(dist.logp[k])
            labels.append(k)
            state = pn_step(params, state, k)
            emitted += 1
    return DecodeResult([(tuple(labels), score)])
