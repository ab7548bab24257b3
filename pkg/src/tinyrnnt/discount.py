"""Adaptive implicit-LM discount scoring.

The discounted token score is

    score = log P_rnnt - lam * max(0, d) * log P_ilm

where d is zero for blank and (1 - p_roll) * KL(P_ilm || P_iam) otherwise.
Since log P_ilm <= 0, the correction never lowers a token's raw score: it
boosts tokens the implicit LM dislikes wherever the implicit LM and AM
disagree and the recent hypothesis looks rare to the LM.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import BLANK_ID, NEG_INF, LogDistribution, UsageError


@dataclass(frozen=True)
class DiscountConfig:
    lam: float
    rho: float
    p_roll_init: float = 1.0
    static_mode: bool = False
    ema: bool = False  # experimental true moving average; off by default

    def __post_init__(self):
        if self.lam < 0:
            raise UsageError("discount weight lam must be non-negative")
        if not 0.0 <= self.rho <= 1.0:
            raise UsageError("rolling coefficient rho must lie in [0, 1]")
        if self.p_roll_init < 0:
            raise UsageError("p_roll_init must be non-negative")


@dataclass(frozen=True)
class RollingState:
    """Rolling accumulation of implicit-LM probabilities of emitted tokens."""

    p_roll: float = 1.0


def kl_divergence(p: LogDistribution, q: LogDistribution) -> float:
    """KL(p || q) over the full vocabulary including blank.

    Terms with exactly-zero p mass are skipped; p mass on exactly-zero q mass
    gives +inf.  Softmax outputs are strictly positive, so the +inf path is
    defensive only.
    """
    if p.size != q.size:
        raise UsageError(f"distribution sizes differ: {p.size} vs {q.size}")
    support = p.logp > NEG_INF
    if np.any(support & (q.logp == NEG_INF)):
        return float("inf")
    pl = p.logp[support]
    ql = q.logp[support]
    return float(np.sum(np.exp(pl) * (pl - ql)))


def update_roll(state: RollingState, rho: float, p_ilm_of_emitted: float, ema: bool = False) -> RollingState:
    """Advance the rolling value by one non-blank emission: rho * p_roll + p."""
    if not 0.0 <= p_ilm_of_emitted <= 1.0:
        raise UsageError("p_ilm_of_emitted must be a probability")
    if ema:
        return RollingState(rho * state.p_roll + (1.0 - rho) * p_ilm_of_emitted)
    return RollingState(rho * state.p_roll + p_ilm_of_emitted)


def d_adapt(kl: float, state: RollingState, token: int, blank_index: int = BLANK_ID) -> float:
    """Adaptive discount factor: 0 for blank, (1 - p_roll) * KL otherwise.

    May be negative when p_roll exceeds 1; score_disc clamps it at zero.
    The p_roll used is that of the hypothesis prefix before the candidate.
    """
    if token == blank_index:
        return 0.0
    return (1.0 - state.p_roll) * kl


def score_disc(log_prnnt: float, log_pilm: float, d: float, lam: float) -> float:
    """Discounted token score: log P_rnnt - lam * max(0, d) * log P_ilm."""
    return log_prnnt - lam * max(0.0, d) * log_pilm
