"""Transducer lattice loss, auxiliary implicit-LM/AM losses, and analytic gradients.

The training objective is

    L = NLL_full + alpha * NLL_ilm + beta * NLL_iam

where each NLL marginalizes over monotone alignments of a T x (K+1) lattice.
The full lattice combines encoder and predictor outputs (with the predictor
row g_u randomly zeroed per prefix position); the ilm lattice broadcasts g_u
over all frames, the iam lattice broadcasts h_t over all prefixes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    BLANK_ID,
    NEG_INF,
    LogDistribution,
    NumericError,
    UsageError,
    derive_seed,
    log_softmax,
    validate_labels,
)
from .model import (
    ModelDims,
    ModelParams,
    gru_backward,
    param_shapes,
    pn_forward_cached,
    tn_forward_cached,
)

LATTICE_MODES = ("full", "ilm", "iam")

Gradients = dict[str, np.ndarray]


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.125
    beta: float = 0.125
    eta: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise UsageError("loss weights alpha/beta must be non-negative")
        if not 0.0 <= self.eta <= 1.0:
            raise UsageError("mask probability eta must lie in [0, 1]")


@dataclass
class Lattice:
    """T x (K+1) grid of log-probability rows over the vocabulary."""

    lp: np.ndarray

    def __post_init__(self):
        if self.lp.ndim != 3:
            raise UsageError(f"lattice must be (T, K+1, v), got shape {self.lp.shape}")

    @property
    def T(self) -> int:
        return self.lp.shape[0]

    @property
    def K(self) -> int:
        return self.lp.shape[1] - 1

    @property
    def v(self) -> int:
        return self.lp.shape[2]

    def dist(self, t: int, u: int) -> LogDistribution:
        return LogDistribution(self.lp[t, u])


@dataclass
class BatchReport:
    """Per-batch mask record and unweighted loss components."""

    masks: dict[str, np.ndarray] = field(default_factory=dict)
    nll_full: float = 0.0
    nll_ilm: float = 0.0
    nll_iam: float = 0.0


def pn_mask(seed: int, example_id: str, length: int, eta: float) -> np.ndarray:
    """Bernoulli(eta) mask per prefix position, keyed by (seed, example id).

    Keying by example id (not draw order) keeps parallel and serial batch
    evaluation bit-comparable.
    """
    rng = np.random.default_rng(derive_seed(seed, "pn-mask", example_id))
    return rng.random(length) < eta


def _joint_rows(params: ModelParams, a: np.ndarray) -> np.ndarray:
    logits = a @ params.tensors["joint_w"].T + params.tensors["joint_b"]
    return log_softmax(logits)


def build_lattice(
    params: ModelParams,
    x: np.ndarray,
    y,
    mode: str = "full",
    mask_pn: np.ndarray | None = None,
) -> Lattice:
    """Materialize the mode's T x (K+1) lattice of joint distributions."""
    if mode not in LATTICE_MODES:
        raise UsageError(f"unknown lattice mode {mode!r}; valid: {LATTICE_MODES}")
    y = validate_labels(y, params.dims.v)
    h = tn_forward_cached(params, x)[0]
    g = pn_forward_cached(params, y)[0]
    if mode != "full" and mask_pn is not None:
        raise UsageError("mask_pn applies to the full lattice only")
    if mode == "full":
        if mask_pn is None:
            mask_pn = np.zeros(len(y) + 1, dtype=bool)
        mask_pn = np.asarray(mask_pn, dtype=bool)
        if mask_pn.shape != (len(y) + 1,):
            raise UsageError(f"mask_pn must have length K+1 = {len(y) + 1}")
        g_eff = g * (~mask_pn)[:, None]
        a = np.tanh(h[:, None, :] + g_eff[None, :, :])
        return Lattice(_joint_rows(params, a))
    if mode == "ilm":
        rows = _joint_rows(params, np.tanh(g))
        return Lattice(np.broadcast_to(rows[None, :, :], (h.shape[0],) + rows.shape).copy())
    rows = _joint_rows(params, np.tanh(h))
    return Lattice(np.broadcast_to(rows[:, None, :], (rows.shape[0], len(y) + 1, rows.shape[1])).copy())


def _emission_arrays(lp: np.ndarray, y) -> tuple[np.ndarray, np.ndarray]:
    frames, u1, _ = lp.shape
    lpb = lp[:, :, BLANK_ID]
    lpe = np.full((frames, u1), NEG_INF)
    if y:
        lpe[:, : len(y)] = lp[:, np.arange(len(y)), list(y)]
    return lpb, lpe


def _forward_alpha(lpb: np.ndarray, lpe: np.ndarray) -> np.ndarray:
    """alpha[t, u]: log-mass of all partial alignments reaching node (t, u).

    Anti-diagonals t + u = d depend only on diagonal d - 1; each diagonal of a
    C-contiguous (T, K+1) array is the strided slice flat[d + t*K : : K], so
    the whole update runs on views without index gathers.
    """
    frames, u1 = lpb.shape
    k = u1 - 1
    alpha = np.full((frames, u1), NEG_INF)
    if k == 0:
        alpha[0, 0] = 0.0
        alpha[1:, 0] = np.cumsum(lpb[:-1, 0])
        return alpha
    af = alpha.ravel()
    bf = np.ascontiguousarray(lpb).ravel()
    ef = np.ascontiguousarray(lpe).ravel()
    af[0] = 0.0
    for d in range(1, frames + k):
        lo, hi = max(0, d - k), min(frames - 1, d)
        cur = af[d + lo * k: d + hi * k + 1: k]
        t0b = max(lo, 1)  # blank arcs come from (t-1, u); none for t = 0
        if t0b <= hi:
            src = af[(d - 1) + (t0b - 1) * k: (d - 1) + (hi - 1) * k + 1: k]
            arc = bf[(d - 1) + (t0b - 1) * k: (d - 1) + (hi - 1) * k + 1: k]
            cur[t0b - lo:] = src + arc
        t1e = min(hi, d - 1)  # emit arcs come from (t, u-1); none for u = 0
        if lo <= t1e:
            src = af[(d - 1) + lo * k: (d - 1) + t1e * k + 1: k]
            arc = ef[(d - 1) + lo * k: (d - 1) + t1e * k + 1: k]
            seg = cur[: t1e - lo + 1]
            np.logaddexp(seg, src + arc, out=seg)
    return alpha


def _backward_beta(lpb: np.ndarray, lpe: np.ndarray) -> np.ndarray:
    """beta[t, u]: log-mass of all completions from (t, u), including its own arc."""
    frames, u1 = lpb.shape
    k = u1 - 1
    beta = np.full((frames, u1), NEG_INF)
    if k == 0:
        beta[:, 0] = np.cumsum(lpb[::-1, 0])[::-1]
        return beta
    btf = beta.ravel()
    bf = np.ascontiguousarray(lpb).ravel()
    ef = np.ascontiguousarray(lpe).ravel()
    btf[(frames - 1) * u1 + k] = lpb[frames - 1, k]
    for d in range(frames + k - 2, -1, -1):
        lo, hi = max(0, d - k), min(frames - 1, d)
        cur = btf[d + lo * k: d + hi * k + 1: k]
        t1b = min(hi, frames - 2)  # blank continues to (t+1, u); none for t = T-1
        if lo <= t1b:
            nxt = btf[(d + 1) + (lo + 1) * k: (d + 1) + (t1b + 1) * k + 1: k]
            arc = bf[d + lo * k: d + t1b * k + 1: k]
            cur[: t1b - lo + 1] = arc + nxt
        t0e = max(lo, d - k + 1)  # emit continues to (t, u+1); none for u = K
        if t0e <= hi:
            nxt = btf[(d + 1) + t0e * k: (d + 1) + hi * k + 1: k]
            arc = ef[d + t0e * k: d + hi * k + 1: k]
            seg = cur[t0e - lo:]
            np.logaddexp(seg, arc + nxt, out=seg)
    return beta


def _check_lattice_args(lattice: Lattice, y) -> tuple:
    y = validate_labels(y, lattice.v)
    if lattice.T < 1:
        raise UsageError("lattice has no frames")
    if len(y) != lattice.K:
        raise UsageError(f"label length {len(y)} does not match lattice K {lattice.K}")
    return y


def transducer_nll(lattice: Lattice, y) -> float:
    """-log of the total probability over all monotone blank/label alignments."""
    y = _check_lattice_args(lattice, y)
    lpb, lpe = _emission_arrays(lattice.lp, y)
    alpha = _forward_alpha(lpb, lpe)
    return float(-(alpha[lattice.T - 1, lattice.K] + lpb[lattice.T - 1, lattice.K]))


def _nll_and_cell_grad(lp: np.ndarray, y) -> tuple[float, np.ndarray]:
    frames, u1, _ = lp.shape
    k = u1 - 1
    lpb, lpe = _emission_arrays(lp, y)
    alpha = _forward_alpha(lpb, lpe)
    beta = _backward_beta(lpb, lpe)
    loglik = alpha[frames - 1, k] + lpb[frames - 1, k]
    if not np.isfinite(loglik):
        raise NumericError("alignment marginal is zero; gradients undefined")
    occ_blank = np.full((frames, u1), NEG_INF)
    if frames > 1:
        occ_blank[: frames - 1, :] = alpha[: frames - 1, :] + lpb[: frames - 1, :] + beta[1:, :]
    occ_blank[frames - 1, k] = np.logaddexp(occ_blank[frames - 1, k], loglik)
    grad = np.zeros_like(lp)
    grad[:, :, BLANK_ID] = -np.exp(occ_blank - loglik)
    if k > 0:
        occ_emit = alpha[:, :k] + lpe[:, :k] + beta[:, 1:]
        for u in range(k):
            grad[:, u, y[u]] += -np.exp(occ_emit[:, u] - loglik)
    return float(-loglik), grad


def transducer_nll_grad(lattice: Lattice, y) -> np.ndarray:
    """Gradient of the alignment NLL w.r.t. every lattice log-probability."""
    y = _check_lattice_args(lattice, y)
    return _nll_and_cell_grad(lattice.lp, y)[1]


def _dlogits(lp: np.ndarray, dlp: np.ndarray) -> np.ndarray:
    # chain rule through log-softmax
    return dlp - np.exp(lp) * dlp.sum(axis=-1, keepdims=True)


def zero_grads(dims: ModelDims) -> Gradients:
    return {name: np.zeros(shape) for name, shape in param_shapes(dims).items()}


def example_loss_and_grads(
    params: ModelParams,
    x: np.ndarray,
    y,
    alpha: float,
    beta: float,
    mask_pn: np.ndarray,
) -> tuple[float, float, float, Gradients]:
    """Loss components and parameter gradients for one (x, y) example."""
    t = params.tensors
    y = validate_labels(y, params.dims.v)
    h, hs_enc, enc_cache, x = tn_forward_cached(params, x)
    g, ss_pred, pn_cache, xs_pn = pn_forward_cached(params, y)
    keep = (~np.asarray(mask_pn, dtype=bool)).astype(np.float64)[:, None]

    a_full = np.tanh(h[:, None, :] + (g * keep)[None, :, :])
    a_ilm = np.tanh(g)
    a_iam = np.tanh(h)
    lp_full = _joint_rows(params, a_full)
    lp_ilm = _joint_rows(params, a_ilm)
    lp_iam = _joint_rows(params, a_iam)

    frames, u1 = h.shape[0], len(y) + 1
    nll_full, g_full = _nll_and_cell_grad(lp_full, y)
    nll_ilm, g_ilm = _nll_and_cell_grad(
        np.broadcast_to(lp_ilm[None, :, :], (frames,) + lp_ilm.shape), y
    )
    nll_iam, g_iam = _nll_and_cell_grad(
        np.broadcast_to(lp_iam[:, None, :], (frames, u1, lp_iam.shape[1])), y
    )

    dlog_full = _dlogits(lp_full, g_full)
    dlog_ilm = _dlogits(lp_ilm, alpha * g_ilm.sum(axis=0))
    dlog_iam = _dlogits(lp_iam, beta * g_iam.sum(axis=1))

    v, j = params.dims.v, params.dims.d_joint
    grads = zero_grads(params.dims)
    grads["joint_w"] = (
        dlog_full.reshape(-1, v).T @ a_full.reshape(-1, j)
        + dlog_ilm.T @ a_ilm
        + dlog_iam.T @ a_iam
    )
    grads["joint_b"] = dlog_full.sum(axis=(0, 1)) + dlog_ilm.sum(axis=0) + dlog_iam.sum(axis=0)

    w_joint = t["joint_w"]
    dpre_full = (dlog_full @ w_joint) * (1.0 - a_full * a_full)
    dh = dpre_full.sum(axis=1) + (dlog_iam @ w_joint) * (1.0 - a_iam * a_iam)
    dg = dpre_full.sum(axis=0) * keep + (dlog_ilm @ w_joint) * (1.0 - a_ilm * a_ilm)

    grads["tn_proj_w"] = dh.T @ hs_enc
    grads["tn_proj_b"] = dh.sum(axis=0)
    dhs_enc = dh @ t["tn_proj_w"]
    dwx, dwh, db, _, _ = gru_backward(t["tn_wx"], t["tn_wh"], x, enc_cache, dhs_enc)
    grads["tn_wx"], grads["tn_wh"], grads["tn_b"] = dwx, dwh, db

    grads["pn_proj_w"] = dg.T @ ss_pred
    grads["pn_proj_b"] = dg.sum(axis=0)
    dss = dg @ t["pn_proj_w"]
    dwx, dwh, db, dxs, _ = gru_backward(t["pn_wx"], t["pn_wh"], xs_pn, pn_cache, dss)
    grads["pn_wx"], grads["pn_wh"], grads["pn_b"] = dwx, dwh, db
    grads["pn_sos"] = dxs[0].copy()
    for u, label in enumerate(y):
        grads["pn_embed"][label] += dxs[u + 1]

    return nll_full, nll_ilm, nll_iam, grads


def combined_loss_and_grads(
    params: ModelParams,
    batch,
    cfg: LossConfig,
) -> tuple[float, Gradients, BatchReport]:
    """Mean three-term loss and accumulated gradients over a batch of (id, x, y).

    Only the full lattice sees the Bernoulli(eta) predictor masks; the ilm and
    iam lattices are never masked.  Deterministic given cfg.seed and the
    example ids.
    """
    if not batch:
        raise UsageError("batch must contain at least one example")
    total = zero_grads(params.dims)
    report = BatchReport()
    loss_sum = 0.0
    for example_id, x, y in batch:
        mask = pn_mask(cfg.seed, example_id, len(y) + 1, cfg.eta)
        report.masks[example_id] = mask
        try:
            nll_full, nll_ilm, nll_iam, grads = example_loss_and_grads(
                params, x, y, cfg.alpha, cfg.beta, mask
            )
        except NumericError as exc:
            raise NumericError(f"example {example_id!r}: {exc}") from exc
        loss = nll_full + cfg.alpha * nll_ilm + cfg.beta * nll_iam
        if not np.isfinite(loss):
            raise NumericError(f"example {example_id!r}: non-finite loss {loss!r}")
        loss_sum += loss
        report.nll_full += nll_full
        report.nll_ilm += nll_ilm
        report.nll_iam += nll_iam
        for name, grad in grads.items():
            total[name] += grad
    n = len(batch)
    for name in total:
        total[name] /= n
    report.nll_full /= n
    report.nll_ilm /= n
    report.nll_iam /= n
    return loss_sum / n, total, report


def grad_norm(grads: Gradients) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def clip_gradients(grads: Gradients, max_norm: float) -> Gradients:
    """Scale the whole gradient down to max_norm if its global norm exceeds it."""
    norm = grad_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}


def sgd_step(params: ModelParams, grads: Gradients, lr: float) -> ModelParams:
    """params - lr * grads, element-wise."""
    if lr < 0:
        raise UsageError("learning rate must be non-negative")
    if set(grads) != set(params.tensors):
        raise UsageError("gradient names do not match parameter names")
    new = {}
    for name, tensor in params.tensors.items():
        if grads[name].shape != tensor.shape:
            raise UsageError(f"gradient {name} has shape {grads[name].shape}, expected {tensor.shape}")
        new[name] = tensor - lr * grads[name]
    return ModelParams(params.dims, new)
