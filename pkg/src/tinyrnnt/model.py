"""Tiny trainable transducer: recurrent encoder, label predictor, additive joint.

The encoder (acoustic side) and predictor (label side) are single-layer gated
recurrent cells; the joint adds the two projected encodings element-wise,
applies tanh, and maps to vocabulary logits.  Zeroing either side of the
addition yields the standalone implicit-LM / implicit-AM distributions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

import numpy as np

from .core import (
    BLANK_ID,
    LogDistribution,
    UsageError,
    log_softmax,
    validate_features,
)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelDims:
    d_in: int
    d_enc: int
    d_pred: int
    d_joint: int
    v: int
    d_emb: int = 8

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if not isinstance(val, int) or val < 1:
                raise UsageError(f"dimension {f.name}={val!r} must be a positive integer")
        if self.v < 2:
            raise UsageError("vocabulary size must be at least 2 (blank plus one token)")


def param_shapes(dims: ModelDims) -> dict[str, tuple[int, ...]]:
    h, p, j, v, e, d = dims.d_enc, dims.d_pred, dims.d_joint, dims.v, dims.d_emb, dims.d_in
    return {
        "tn_wx": (3 * h, d),
        "tn_wh": (3 * h, h),
        "tn_b": (3 * h,),
        "tn_proj_w": (j, h),
        "tn_proj_b": (j,),
        "pn_embed": (v, e),
        "pn_sos": (e,),
        "pn_wx": (3 * p, e),
        "pn_wh": (3 * p, p),
        "pn_b": (3 * p,),
        "pn_proj_w": (j, p),
        "pn_proj_b": (j,),
        "joint_w": (v, j),
        "joint_b": (v,),
    }


@dataclass
class ModelParams:
    dims: ModelDims
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = param_shapes(self.dims)
        if set(self.tensors) != set(expected):
            raise UsageError("parameter tensor names do not match the model layout")
        for name, shape in expected.items():
            t = self.tensors[name]
            if t.shape != shape:
                raise UsageError(f"tensor {name} has shape {t.shape}, expected {shape}")
            if not np.isfinite(t).all():
                raise UsageError(f"tensor {name} contains non-finite values")

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, {k: v.copy() for k, v in self.tensors.items()})

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def tn_weights(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith("tn_")}

    def pn_weights(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith("pn_")}

    def joint_weights(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith("joint_")}


def init_params(dims: ModelDims, seed: int) -> ModelParams:
    """Uniform(-r, r) weights with r = 1/sqrt(fan-in); biases zero; deterministic in (dims, seed)."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(dims).items():
        if name.endswith("_b"):
            tensors[name] = np.zeros(shape)
        else:
            r = 1.0 / np.sqrt(shape[-1])
            tensors[name] = rng.uniform(-r, r, size=shape)
    return ModelParams(dims, tensors)


def zero_params(dims: ModelDims) -> ModelParams:
    """All-zero parameters; the joint then emits the uniform distribution (test hook)."""
    return ModelParams(dims, {n: np.zeros(s) for n, s in param_shapes(dims).items()})


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def gru_step(wx, wh, b, x, h_prev):
    """One gated recurrent step; returns (h_new, cache) for backprop."""
    k = h_prev.shape[0]
    xw = wx @ x + b
    hw = wh @ h_prev
    z = _sigmoid(xw[:k] + hw[:k])
    r = _sigmoid(xw[k:2 * k] + hw[k:2 * k])
    hw_n = hw[2 * k:]
    n = np.tanh(xw[2 * k:] + r * hw_n)
    h_new = (1.0 - z) * n + z * h_prev
    return h_new, (x, h_prev, z, r, n, hw_n)


def gru_forward(wx, wh, b, xs, h0):
    """Run the cell over a sequence; returns per-step states and a backprop cache."""
    steps = xs.shape[0]
    k = h0.shape[0]
    xw = xs @ wx.T + b
    hs = np.empty((steps, k))
    caches = []
    h = h0
    for t in range(steps):
        hw = wh @ h
        z = _sigmoid(xw[t, :k] + hw[:k])
        r = _sigmoid(xw[t, k:2 * k] + hw[k:2 * k])
        hw_n = hw[2 * k:]
        n = np.tanh(xw[t, 2 * k:] + r * hw_n)
        h_new = (1.0 - z) * n + z * h
        caches.append((h, z, r, n, hw_n))
        hs[t] = h_new
        h = h_new
    return hs, caches


def gru_backward(wx, wh, xs, caches, dhs):
    """Backprop through time.  dhs[t] is the loss gradient arriving at state t.

    Only the state recurrence is sequential; the weight-gradient matmuls are
    deferred and batched over all steps.  Returns (dwx, dwh, db, dxs, dh0).
    """
    steps, k = dhs.shape
    dpre = np.empty((steps, 3 * k))
    drec = np.empty((steps, 3 * k))
    hprevs = np.empty((steps, k))
    wh_t = wh.T
    dh = np.zeros(k)
    for t in range(steps - 1, -1, -1):
        dh = dh + dhs[t]
        h_prev, z, r, n, hw_n = caches[t]
        dn = dh * (1.0 - z)
        dz = dh * (h_prev - n)
        dan = dn * (1.0 - n * n)
        dr = dan * hw_n
        daz = dz * z * (1.0 - z)
        dar = dr * r * (1.0 - r)
        dpre[t, :k] = daz
        dpre[t, k:2 * k] = dar
        dpre[t, 2 * k:] = dan
        drec[t, :k] = daz
        drec[t, k:2 * k] = dar
        drec[t, 2 * k:] = dan * r
        hprevs[t] = h_prev
        dh = dh * z + wh_t @ drec[t]
    return dpre.T @ xs, drec.T @ hprevs, dpre.sum(axis=0), dpre @ wx, dh


def tn_forward_cached(params: ModelParams, x: np.ndarray):
    """Encoder forward keeping recurrent caches for backprop."""
    t = params.tensors
    x = validate_features(x)
    if x.shape[1] != params.dims.d_in:
        raise UsageError(
            f"feature dimension {x.shape[1]} does not match model d_in {params.dims.d_in}"
        )
    hs, caches = gru_forward(t["tn_wx"], t["tn_wh"], t["tn_b"], x, np.zeros(params.dims.d_enc))
    h = hs @ t["tn_proj_w"].T + t["tn_proj_b"]
    return h, hs, caches, x


def tn_forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Causal encoding of the feature sequence; one d_joint row per frame."""
    return tn_forward_cached(params, x)[0]


@dataclass(frozen=True)
class PredictorState:
    """Predictor recurrent state after a label prefix, plus its joint-space output."""

    h: np.ndarray
    g: np.ndarray


def pn_start(params: ModelParams) -> PredictorState:
    """Empty-prefix state: feed the learned start embedding once."""
    t = params.tensors
    h, _ = gru_step(t["pn_wx"], t["pn_wh"], t["pn_b"], t["pn_sos"], np.zeros(params.dims.d_pred))
    return PredictorState(h, t["pn_proj_w"] @ h + t["pn_proj_b"])


def pn_step(params: ModelParams, state: PredictorState, label: int) -> PredictorState:
    """Advance the predictor by one non-blank label."""
    if label == BLANK_ID:
        raise UsageError("the predictor never consumes blank")
    if not 0 <= label < params.dims.v:
        raise UsageError(f"label {label} out of vocabulary range")
    t = params.tensors
    h, _ = gru_step(t["pn_wx"], t["pn_wh"], t["pn_b"], t["pn_embed"][label], state.h)
    return PredictorState(h, t["pn_proj_w"] @ h + t["pn_proj_b"])


def pn_forward_cached(params: ModelParams, y):
    """Predictor forward over a whole prefix, g row per prefix length 0..K."""
    t = params.tensors
    for label in y:
        if label == BLANK_ID or not 0 <= label < params.dims.v:
            raise UsageError(f"label {label} out of range or blank")
    xs = np.vstack([t["pn_sos"][None, :]] + [t["pn_embed"][l][None, :] for l in y])
    ss, caches = gru_forward(t["pn_wx"], t["pn_wh"], t["pn_b"], xs, np.zeros(params.dims.d_pred))
    g = ss @ t["pn_proj_w"].T + t["pn_proj_b"]
    return g, ss, caches, xs


def joint_dist(
    params: ModelParams,
    h_t: np.ndarray | None,
    g_u: np.ndarray | None,
) -> LogDistribution:
    """Vocabulary distribution from the additive joint; None means the zero identity vector.

    Both present -> the full transducer distribution; g zeroed -> implicit AM;
    h zeroed -> implicit LM.
    """
    j = params.dims.d_joint
    if h_t is None:
        h_t = np.zeros(j)
    if g_u is None:
        g_u = np.zeros(j)
    if h_t.shape != (j,) or g_u.shape != (j,):
        raise UsageError(f"joint inputs must be vectors of dimension {j}")
    a = np.tanh(h_t + g_u)
    logits = params.tensors["joint_w"] @ a + params.tensors["joint_b"]
    return LogDistribution(log_softmax(logits))


def save_params(params: ModelParams, path, init_seed: int | None = None, epoch: int = 0) -> None:
    """Write a value-exact checkpoint (decimal doubles via repr round-trip)."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "dims": {f.name: getattr(params.dims, f.name) for f in fields(ModelDims)},
        "init_seed": init_seed,
        "epoch": epoch,
        "tensors": {
            name: {"shape": list(t.shape), "data": t.ravel().tolist()}
            for name, t in params.tensors.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_params(path) -> tuple[ModelParams, dict]:
    """Read a checkpoint; returns (params, meta) with meta = {init_seed, epoch}."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"checkpoint {path} is not valid structured text: {exc}") from exc
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise UsageError(f"unsupported checkpoint format version {doc.get('format_version')!r}")
    dims = ModelDims(**doc["dims"])
    tensors = {}
    for name, spec in doc["tensors"].items():
        tensors[name] = np.array(spec["data"], dtype=np.float64).reshape(spec["shape"])
    params = ModelParams(dims, tensors)
    meta = {"init_seed": doc.get("init_seed"), "epoch": int(doc.get("epoch", 0))}
    return params, meta
