"""Baseline extrapolators and a small from-scratch LSTM displacement forecaster.

The LSTM consumes 100 ms windows of 2-D velocity and emits the gaze
displacement from the window end to the window end + PI. Everything here is
plain numpy in float64: forward, backpropagation through time, and Adam are
written out explicitly so the gradient can be checked against central finite
differences.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import (
    AlignmentError,
    ConfigError,
    DivergenceError,
    EmptyInputError,
)
from .opkf import PredictionRun
from .signal import GazeRecording, VelocityTrace

WINDOW_SAMPLES = 100
HIDDEN = 32

# velocities arrive in dva/s; the net sees dva/ms so the inputs live in a
# range where the gate nonlinearities are not saturated from the start
INPUT_SCALE = 1e-3

# gate rows within each stacked (4*HIDDEN, .) LSTM matrix
_I, _F, _G, _O = (slice(k * HIDDEN, (k + 1) * HIDDEN) for k in range(4))

PARAM_SHAPES: dict[str, tuple[int, ...]] = {
    "lstm1.Wx": (4 * HIDDEN, 2),
    "lstm1.Wh": (4 * HIDDEN, HIDDEN),
    "lstm1.b": (4 * HIDDEN,),
    "lstm2.Wx": (4 * HIDDEN, HIDDEN),
    "lstm2.Wh": (4 * HIDDEN, HIDDEN),
    "lstm2.b": (4 * HIDDEN,),
    "fc1.W": (32, HIDDEN),
    "fc1.b": (32,),
    "fc2.W": (16, 32),
    "fc2.b": (16,),
    "out.W": (2, 16),
    "out.b": (2,),
}

N_PARAMS = sum(int(np.prod(s)) for s in PARAM_SHAPES.values())  # 14418


class WindowSample(NamedTuple):
    """One training example: velocity window plus displacement target."""

    input: np.ndarray  # (100, 2) velocity in dva/s
    target: np.ndarray  # (2,) displacement in dva, window end -> end + PI
    end_idx: int  # sample index of the window end in the recording


@dataclass
class WindowBatch:
    """Column-wise window storage; indexes like a sequence of WindowSample."""

    inputs: np.ndarray  # (n, 100, 2)
    targets: np.ndarray  # (n, 2)
    end_indices: np.ndarray  # (n,)

    def __post_init__(self):
        n = len(self.inputs)
        if len(self.targets) != n or len(self.end_indices) != n:
            raise AlignmentError("window arrays disagree on length")

    def __len__(self) -> int:
        return len(self.inputs)

    def __getitem__(self, key):
        if isinstance(key, (int, np.integer)):
            return WindowSample(self.inputs[key], self.targets[key], int(self.end_indices[key]))
        return WindowBatch(self.inputs[key], self.targets[key], self.end_indices[key])


def _valid_window_ends(rec: GazeRecording, vel: VelocityTrace, pi_ms: int, require_target: bool) -> np.ndarray:
    """Window-end indices whose trailing 100 samples are all usable."""
    n = rec.n_samples
    if len(vel.vx) != n:
        raise AlignmentError("velocity trace misaligned with recording")
    ok = vel.valid & rec.valid
    csum = np.concatenate([[0], np.cumsum(ok.astype(np.int64))])
    ends = np.arange(WINDOW_SAMPLES - 1, n)
    full = (csum[ends + 1] - csum[ends + 1 - WINDOW_SAMPLES]) == WINDOW_SAMPLES
    ends = ends[full]
    if require_target:
        ends = ends[ends + pi_ms <= n - 1]
        ends = ends[rec.valid[ends + pi_ms]]
    return ends


def make_windows(rec: GazeRecording, vel: VelocityTrace, pi_ms: int) -> WindowBatch:
    """Sliding windows at stride 1 ms; invalid spans and targets are dropped.

    A window ending at sample t needs velocity for samples [t-99, t] and a
    valid gaze position at t and t + PI; anything touching a blink fails the
    validity flags and vanishes here. An empty batch is a legal result.
    """
    if pi_ms < 1:
        raise ConfigError(f"pi_ms must be a positive sample count, got {pi_ms}")
    ends = _valid_window_ends(rec, vel, pi_ms, require_target=True)
    if ends.size == 0:
        return WindowBatch(
            np.empty((0, WINDOW_SAMPLES, 2)), np.empty((0, 2)), np.empty(0, dtype=np.int64)
        )
    vxy = np.column_stack([vel.vx, vel.vy])
    view = np.lib.stride_tricks.sliding_window_view(vxy, WINDOW_SAMPLES, axis=0)
    inputs = np.ascontiguousarray(view[ends - (WINDOW_SAMPLES - 1)].transpose(0, 2, 1))
    targets = np.column_stack(
        [rec.x[ends + pi_ms] - rec.x[ends], rec.y[ends + pi_ms] - rec.y[ends]]
    )
    return WindowBatch(inputs, targets, ends.astype(np.int64))


# ---------------------------------------------------------------------------
# model


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class LstmModel:
    """Two stacked LSTM layers (hidden 32) with a small dense head.

    Head wiring: last hidden state -> FC 32->32 (rectified) -> FC 32->16
    (rectified) -> linear 16->2. The 2-unit projection exists to reach the
    displacement output and is counted in N_PARAMS.
    """

    def __init__(self, params: dict[str, np.ndarray], input_scale: float = INPUT_SCALE):
        for name, shape in PARAM_SHAPES.items():
            if name not in params:
                raise ConfigError(f"missing parameter tensor {name}")
            if params[name].shape != shape:
                raise ConfigError(
                    f"parameter {name} has shape {params[name].shape}, expected {shape}"
                )
        self.params = {name: np.asarray(params[name], dtype=float) for name in PARAM_SHAPES}
        self.input_scale = float(input_scale)

    @classmethod
    def init_seeded(cls, rng_seed: int) -> "LstmModel":
        """Glorot-uniform weights, zero biases, forget-gate bias +1."""
        rng = np.random.default_rng(rng_seed)
        params = {}
        for name, shape in PARAM_SHAPES.items():
            if name.endswith(".b"):
                params[name] = np.zeros(shape)
            else:
                limit = math.sqrt(6.0 / (shape[0] + shape[1]))
                params[name] = rng.uniform(-limit, limit, size=shape)
        params["lstm1.b"][_F] = 1.0
        params["lstm2.b"][_F] = 1.0
        return cls(params)

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


def _forward(model: LstmModel, xs: np.ndarray, want_cache: bool):
    """Batched sequence-to-one pass; xs is (B, T, 2) in dva/s."""
    p = model.params
    b, t_len, _ = xs.shape
    x_scaled = xs * model.input_scale

    h = [np.zeros((b, HIDDEN)), np.zeros((b, HIDDEN))]
    c = [np.zeros((b, HIDDEN)), np.zeros((b, HIDDEN))]
    cache = {"x": x_scaled, "steps": []} if want_cache else None

    for t in range(t_len):
        layer_in = x_scaled[:, t, :]
        step_cache = []
        for li, prefix in enumerate(("lstm1", "lstm2")):
            gates = layer_in @ p[f"{prefix}.Wx"].T + h[li] @ p[f"{prefix}.Wh"].T + p[f"{prefix}.b"]
            i = _sigmoid(gates[:, _I])
            f = _sigmoid(gates[:, _F])
            g = np.tanh(gates[:, _G])
            o = _sigmoid(gates[:, _O])
            c_new = f * c[li] + i * g
            tc = np.tanh(c_new)
            h_new = o * tc
            if want_cache:
                step_cache.append((layer_in, h[li], c[li], i, f, g, o, tc))
            layer_in = h_new
            h[li], c[li] = h_new, c_new
        if want_cache:
            cache["steps"].append(step_cache)

    a1_pre = h[1] @ p["fc1.W"].T + p["fc1.b"]
    a1 = np.maximum(a1_pre, 0.0)
    a2_pre = a1 @ p["fc2.W"].T + p["fc2.b"]
    a2 = np.maximum(a2_pre, 0.0)
    pred = a2 @ p["out.W"].T + p["out.b"]
    if want_cache:
        cache["head"] = (h[1], a1_pre, a1, a2_pre, a2)
    return pred, cache


def lstm_forward(model: LstmModel, inputs: np.ndarray) -> np.ndarray:
    """Predict displacement for one window (T, 2) or a batch (B, T, 2)."""
    xs = np.asarray(inputs, dtype=float)
    single = xs.ndim == 2
    if single:
        xs = xs[None]
    if xs.ndim != 3 or xs.shape[-1] != 2 or xs.shape[1] < 1:
        raise ConfigError(f"expected windows shaped (B, T, 2), got {np.shape(inputs)}")
    pred, _ = _forward(model, xs, want_cache=False)
    return pred[0] if single else pred


def _loss_grad_from_pred(pred: np.ndarray, targets: np.ndarray):
    diff = pred - targets
    dist = np.hypot(diff[:, 0], diff[:, 1])
    loss = float(dist.mean())
    # distance is non-differentiable at 0; the floor only guards division
    dpred = diff / (np.maximum(dist, 1e-12)[:, None] * len(pred))
    return loss, dpred


def loss_and_grad(model: LstmModel, inputs: np.ndarray, targets: np.ndarray):
    """Mean Euclidean loss and its gradient for every parameter tensor."""
    xs = np.asarray(inputs, dtype=float)
    ys = np.asarray(targets, dtype=float)
    if xs.ndim != 3 or ys.shape != (len(xs), 2):
        raise ConfigError("inputs must be (B, T, 2) with targets (B, 2)")
    p = model.params
    pred, cache = _forward(model, xs, want_cache=True)
    loss, dpred = _loss_grad_from_pred(pred, ys)

    grads = {k: np.zeros_like(v) for k, v in p.items()}
    h_last, a1_pre, a1, a2_pre, a2 = cache["head"]

    grads["out.W"] += dpred.T @ a2
    grads["out.b"] += dpred.sum(axis=0)
    da2 = (dpred @ p["out.W"]) * (a2_pre > 0)
    grads["fc2.W"] += da2.T @ a1
    grads["fc2.b"] += da2.sum(axis=0)
    da1 = (da2 @ p["fc2.W"]) * (a1_pre > 0)
    grads["fc1.W"] += da1.T @ h_last
    grads["fc1.b"] += da1.sum(axis=0)
    dh_head = da1 @ p["fc1.W"]

    b, t_len, _ = xs.shape
    dh = [np.zeros((b, HIDDEN)), dh_head]
    dc = [np.zeros((b, HIDDEN)), np.zeros((b, HIDDEN))]
    for t in range(t_len - 1, -1, -1):
        for li in (1, 0):
            prefix = ("lstm1", "lstm2")[li]
            layer_in, h_prev, c_prev, i, f, g, o, tc = cache["steps"][t][li]
            dct = dh[li] * o * (1.0 - tc * tc) + dc[li]
            dgates = np.empty((b, 4 * HIDDEN))
            dgates[:, _I] = dct * g * i * (1.0 - i)
            dgates[:, _F] = dct * c_prev * f * (1.0 - f)
            dgates[:, _G] = dct * i * (1.0 - g * g)
            dgates[:, _O] = dh[li] * tc * o * (1.0 - o)
            grads[f"{prefix}.Wx"] += dgates.T @ layer_in
            grads[f"{prefix}.Wh"] += dgates.T @ h_prev
            grads[f"{prefix}.b"] += dgates.sum(axis=0)
            dh[li] = dgates @ p[f"{prefix}.Wh"]
            dc[li] = dct * f
            d_in = dgates @ p[f"{prefix}.Wx"]
            if li == 1:
                # layer 2 reads layer 1's hidden state at the same step
                dh[0] = dh[0] + d_in
    return loss, grads


def evaluate_loss(model: LstmModel, windows, chunk: int = 4096) -> float:
    """Mean Euclidean distance over a window batch, forward-only."""
    n = len(windows.inputs)
    if n == 0:
        raise EmptyInputError("no windows to evaluate")
    total = 0.0
    for s in range(0, n, chunk):
        pred, _ = _forward(model, np.asarray(windows.inputs[s : s + chunk], dtype=float), False)
        diff = pred - windows.targets[s : s + chunk]
        total += float(np.hypot(diff[:, 0], diff[:, 1]).sum())
    return total / n


def gradient_check(
    model: LstmModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    eps: float = 1e-5,
    entry_stride: int = 1,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Deliberately brute force: two full forward passes per checked scalar so
    the reference stays independent of the backward code. ``entry_stride``
    checks every k-th entry of each tensor (still touching all tensors) for
    quick partial runs; 1 checks every parameter.
    """
    xs = np.asarray(inputs, dtype=float)
    ys = np.asarray(targets, dtype=float)
    _, grads = loss_and_grad(model, xs, ys)
    worst = 0.0
    for name in PARAM_SHAPES:
        flat = model.params[name].reshape(-1)
        g_flat = grads[name].reshape(-1)
        for j in range(0, flat.size, entry_stride):
            keep = flat[j]
            flat[j] = keep + eps
            up_pred, _ = _forward(model, xs, False)
            loss_up, _ = _loss_grad_from_pred(up_pred, ys)
            flat[j] = keep - eps
            dn_pred, _ = _forward(model, xs, False)
            loss_dn, _ = _loss_grad_from_pred(dn_pred, ys)
            flat[j] = keep
            numeric = (loss_up - loss_dn) / (2.0 * eps)
            # the difference quotient carries ~1e-11 absolute roundoff, so
            # entries below 1e-6 are compared on that absolute scale instead
            denom = max(abs(numeric) + abs(g_flat[j]), 1e-6)
            worst = max(worst, abs(numeric - g_flat[j]) / denom)
    return worst


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    patience: int = 3
    rng_seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.lr <= 0:
            raise ConfigError("batch_size and epochs must be >= 1 and lr > 0")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")


class EpochStats(NamedTuple):
    epoch: int
    train_loss: float
    val_loss: float  # NaN when no validation windows were given


@dataclass(frozen=True)
class TrainResult:
    history: tuple[EpochStats, ...]
    best_epoch: int


def shuffle_order(n: int, rng_seed: int, epoch: int) -> np.ndarray:
    """Permutation of range(n), deterministic in (seed, epoch)."""
    return np.random.default_rng([rng_seed, epoch]).permutation(n)


def lstm_train(model: LstmModel, windows, cfg: TrainConfig = TrainConfig(), val_windows=None) -> TrainResult:
    """Mini-batch Adam; mutates the model in place and returns the history.

    Shuffles window order each epoch (keyed by seed and epoch), never
    dropping a window. With validation windows the loop early-stops after
    ``patience`` epochs without improvement and restores the best weights.
    """
    xs = np.asarray(windows.inputs, dtype=float)
    ys = np.asarray(windows.targets, dtype=float)
    n = len(xs)
    if n == 0:
        raise EmptyInputError("no training windows")

    adam_t = 0
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(val) for k, val in model.params.items()}

    history: list[EpochStats] = []
    best_val = math.inf
    best_snapshot = None
    best_epoch = 0
    bad_epochs = 0

    for epoch in range(cfg.epochs):
        order = shuffle_order(n, cfg.rng_seed, epoch)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            loss, grads = loss_and_grad(model, xs[sel], ys[sel])
            if not math.isfinite(loss):
                raise DivergenceError(epoch, start // cfg.batch_size)
            total += loss * len(sel)
            adam_t += 1
            bc1 = 1.0 - cfg.beta1**adam_t
            bc2 = 1.0 - cfg.beta2**adam_t
            for name, p in model.params.items():
                g = grads[name]
                m[name] = cfg.beta1 * m[name] + (1.0 - cfg.beta1) * g
                v[name] = cfg.beta2 * v[name] + (1.0 - cfg.beta2) * (g * g)
                p -= cfg.lr * (m[name] / bc1) / (np.sqrt(v[name] / bc2) + cfg.eps)
        train_loss = total / n

        val_loss = float("nan")
        if val_windows is not None and len(val_windows) > 0:
            val_loss = evaluate_loss(model, val_windows)
        history.append(EpochStats(epoch, train_loss, val_loss))

        if math.isfinite(val_loss):
            if val_loss < best_val:
                best_val = val_loss
                best_snapshot = model.copy_params()
                best_epoch = epoch
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= cfg.patience:
                    break
        else:
            best_epoch = epoch

    if best_snapshot is not None:
        for name in model.params:
            model.params[name][...] = best_snapshot[name]
    return TrainResult(history=tuple(history), best_epoch=best_epoch)


def split_subjects(subject_ids, holdout_fraction: float = 0.1, rng_seed: int = 0):
    """Disjoint (train, holdout) subject id split; both sides non-empty."""
    unique = sorted(set(subject_ids))
    if len(unique) < 2:
        raise ConfigError("need at least two subjects to split")
    if not 0.0 < holdout_fraction < 1.0:
        raise ConfigError("holdout_fraction must be in (0, 1)")
    order = np.random.default_rng(rng_seed).permutation(len(unique))
    n_hold = min(max(1, round(len(unique) * holdout_fraction)), len(unique) - 1)
    held = {unique[i] for i in order[:n_hold]}
    train = tuple(s for s in unique if s not in held)
    return train, tuple(sorted(held))


# ---------------------------------------------------------------------------
# persistence


def save_weights(model: LstmModel, path) -> None:
    doc = {
        "format": "lstm-weights-v1",
        "hidden": HIDDEN,
        "input_scale": model.input_scale,
        "params": {
            name: {"shape": list(p.shape), "data": p.reshape(-1).tolist()}
            for name, p in model.params.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_weights(path) -> LstmModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "lstm-weights-v1":
        raise ConfigError(f"unrecognized weights format {doc.get('format')!r}")
    params = {}
    for name, entry in doc["params"].items():
        arr = np.asarray(entry["data"], dtype=float).reshape(entry["shape"])
        params[name] = arr
    return LstmModel(params, input_scale=float(doc.get("input_scale", INPUT_SCALE)))


# ---------------------------------------------------------------------------
# recording-level prediction


def baseline_predict(kind: str, rec: GazeRecording, vel: VelocityTrace | None, pi_ms: int) -> PredictionRun:
    """Reference extrapolators: hold the position, or project the velocity."""
    if pi_ms < 1:
        raise ConfigError(f"pi_ms must be a positive sample count, got {pi_ms}")
    n = rec.n_samples
    predicted = np.full((n, 2), np.nan)
    if kind == "constant-position":
        issued = rec.valid.copy()
        predicted[issued, 0] = rec.x[issued]
        predicted[issued, 1] = rec.y[issued]
    elif kind == "constant-velocity":
        if vel is None:
            raise ConfigError("constant-velocity needs a velocity trace")
        if len(vel.vx) != n:
            raise AlignmentError("velocity trace misaligned with recording")
        issued = rec.valid & vel.valid
        dt_s = pi_ms / 1000.0
        predicted[issued, 0] = rec.x[issued] + vel.vx[issued] * dt_s
        predicted[issued, 1] = rec.y[issued] + vel.vy[issued] * dt_s
    else:
        raise ConfigError(f"unknown baseline kind {kind!r}")
    mask = issued & _target_ok(rec, pi_ms)
    return PredictionRun(predictor_id=kind, pi_ms=pi_ms, predicted=predicted, valid_mask=mask)


def _target_ok(rec: GazeRecording, pi_ms: int) -> np.ndarray:
    n = rec.n_samples
    ok = np.zeros(n, dtype=bool)
    if pi_ms < n:
        ok[: n - pi_ms] = rec.valid[pi_ms:]
    return ok


def lstm_predict_recording(
    model: LstmModel,
    rec: GazeRecording,
    vel: VelocityTrace,
    pi_ms: int,
    chunk: int = 4096,
) -> PredictionRun:
    """Causal pass: at each sample with a clean trailing window, position +
    predicted displacement."""
    if pi_ms < 1:
        raise ConfigError(f"pi_ms must be a positive sample count, got {pi_ms}")
    n = rec.n_samples
    ends = _valid_window_ends(rec, vel, pi_ms, require_target=False)
    ends = ends[rec.valid[ends]]
    predicted = np.full((n, 2), np.nan)
    if ends.size:
        vxy = np.column_stack([vel.vx, vel.vy])
        view = np.lib.stride_tricks.sliding_window_view(vxy, WINDOW_SAMPLES, axis=0)
        for s in range(0, ends.size, chunk):
            sel = ends[s : s + chunk]
            xs = np.ascontiguousarray(view[sel - (WINDOW_SAMPLES - 1)].transpose(0, 2, 1))
            disp, _ = _forward(model, xs, want_cache=False)
            predicted[sel, 0] = rec.x[sel] + disp[:, 0]
            predicted[sel, 1] = rec.y[sel] + disp[:, 1]
    issued = np.zeros(n, dtype=bool)
    issued[ends] = True
    mask = issued & _target_ok(rec, pi_ms)
    return PredictionRun(predictor_id="lstm", pi_ms=pi_ms, predicted=predicted, valid_mask=mask)
