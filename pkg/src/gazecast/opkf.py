"""Plant-informed Kalman prediction of gaze position PI ms ahead.

The filter runs one 4-state Kalman filter per axis over [theta, omega, g_ag,
g_ant], where g = F / (K/2) rescales the plant's muscle-force states into
dva-equivalent units (the holding level for position theta is then g_ag ==
theta exactly), which keeps process-noise scales interpretable. Both axes
share the same dynamics, measurement model, and noise, so their covariances
are identical and the implementation carries the two means through one
covariance recursion.

Two regimes, switched per sample by a zero-lookahead online labeler:

* fixation: constant-velocity kinematics with the force states relaxing
  toward the holding pair of the current position;
* saccade: the plant's target-blind re-equilibration dynamics, under which
  an excited force state coasts the eye through a ballistic completion.

Measurements are position plus a causal (right-edge) Savitzky-Golay
velocity, so every prediction issued at time t depends only on samples <= t.
The PI-ahead output propagates the posterior pi_ms steps holding the current
regime. Per-subject plant parameters can be fitted by Nelder-Mead on a
calibration slice of the subject's own saccades.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .classify import CausalLabeler, ClassifierConfig, EventKind, EventSegment
from .errors import (
    ConfigError,
    FitError,
    InstabilityError,
    InsufficientDataError,
)
from .plant import DEFAULT_PARAMS, PlantParams, transition_matrices
from .signal import DiffConfig, GazeRecording, VelocityTrace, compute_velocity

H_POSVEL = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
H_POS = H_POSVEL[:1]


# ---------------------------------------------------------------------------
# generic Kalman core (works for any state dimension; mean may carry several
# columns that share one covariance)


def kalman_predict(mean, cov, phi, q):
    mean = phi @ mean
    cov = phi @ cov @ phi.T + q
    return mean, 0.5 * (cov + cov.T)


def kalman_update(mean, cov, z, h, r):
    """Measurement update in Joseph form; re-symmetrizes, jitters once if the
    innovation covariance is not positive definite, and errors if that fails."""
    s = h @ cov @ h.T + r
    s = 0.5 * (s + s.T)
    try:
        np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        s = s + np.eye(s.shape[0]) * (1e-9 + 1e-9 * np.trace(s))
        try:
            np.linalg.cholesky(s)
        except np.linalg.LinAlgError:
            raise InstabilityError("innovation covariance not positive definite")
    gain = np.linalg.solve(s, h @ cov).T
    innov = z - h @ mean
    mean = mean + gain @ innov
    ikh = np.eye(cov.shape[0]) - gain @ h
    cov = ikh @ cov @ ikh.T + gain @ r @ gain.T
    return mean, 0.5 * (cov + cov.T)


# ---------------------------------------------------------------------------
# configuration and state


@dataclass(frozen=True)
class OpkfConfig:
    """Filter settings; R defaults derive from the subject's precision."""

    pi_ms: int = 40
    params: PlantParams = DEFAULT_PARAMS
    q_fix_pos: float = 1e-4
    q_fix_vel: float = 1e-4
    q_fix_force: float = 1e-3
    q_sac_pos: float = 1e-6
    q_sac_vel: float = 25.0
    q_sac_force: float = 0.1
    r_pos: float | None = None
    r_vel: float | None = None
    precision_dva: float = 0.1
    regime_source: str = "online"  # "online" (causal) or "segments" (offline labels)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)

    def __post_init__(self):
        if self.pi_ms < 1:
            raise ConfigError(f"pi_ms must be >= 1, got {self.pi_ms}")
        if self.regime_source not in ("online", "segments"):
            raise ConfigError(f"unknown regime_source {self.regime_source!r}")
        for name in ("q_fix_pos", "q_fix_vel", "q_fix_force", "q_sac_pos", "q_sac_vel", "q_sac_force"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    def measurement_noise(self) -> tuple[float, float]:
        """(r_pos, r_vel) variances, derived from precision unless overridden.

        Per-axis position noise sigma is precision/2 for isotropic noise
        (RMS-S2S of iid two-axis noise is 2 sigma); velocity noise follows by
        the causal differentiator's white-noise gain.
        """
        sigma = max(self.precision_dva / 2.0, 1e-3)
        r_pos = self.r_pos if self.r_pos is not None else sigma**2
        if self.r_vel is not None:
            return r_pos, self.r_vel
        gain = DiffConfig(mode="causal").noise_gain()
        return r_pos, r_pos * gain**2


@dataclass(frozen=True)
class KalmanState:
    """Per-axis means stacked as columns of a 4x2 matrix; shared covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        if self.mean.shape != (4, 2) or self.cov.shape != (4, 4):
            raise ConfigError("KalmanState needs mean (4, 2) and cov (4, 4)")

    def position(self) -> np.ndarray:
        return self.mean[0].copy()

    def velocity(self) -> np.ndarray:
        return self.mean[1].copy()


@dataclass(frozen=True)
class PredictionRun:
    """Predictions aligned so predicted[i] targets ground-truth sample i+PI."""

    predictor_id: str
    pi_ms: int
    predicted: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        n = len(self.valid_mask)
        if self.predicted.shape != (n, 2):
            raise ConfigError("predicted must be (n, 2) aligned with valid_mask")


class _RegimeMatrices:
    """Discrete transition/process matrices per regime plus PI-ahead rows."""

    def __init__(self, cfg: OpkfConfig, pi_list: tuple[int, ...]):
        p = cfg.params
        k = p.k_total
        dt = 1e-3

        a_fix = np.eye(4)
        a_fix[0, 1] = dt
        for row, tau, sgn in ((2, p.tau_ag_deact, 1.0), (3, p.tau_ant_act, -1.0)):
            alpha = float(np.exp(-dt / tau))
            a_fix[row, row] = alpha
            a_fix[row, 0] = sgn * (1.0 - alpha)
        self.phi_fix = a_fix
        self.q_fix = np.diag([cfg.q_fix_pos, cfg.q_fix_vel, cfg.q_fix_force, cfg.q_fix_force])

        phi_phys, _ = transition_matrices(p, 1.0)
        scale = np.diag([1.0, 1.0, 2.0 / k, 2.0 / k])
        unscale = np.diag([1.0, 1.0, k / 2.0, k / 2.0])
        self.phi_sac = scale @ phi_phys @ unscale
        self.q_sac = np.diag([cfg.q_sac_pos, cfg.q_sac_vel, cfg.q_sac_force, cfg.q_sac_force])

        self.pi_rows: dict[tuple[bool, int], np.ndarray] = {}
        for pi in pi_list:
            self.pi_rows[(False, pi)] = np.linalg.matrix_power(self.phi_fix, pi)[0]
            self.pi_rows[(True, pi)] = np.linalg.matrix_power(self.phi_sac, pi)[0]

    def pick(self, saccade: bool):
        return (self.phi_sac, self.q_sac) if saccade else (self.phi_fix, self.q_fix)


def _initial_state(z_pos: np.ndarray, r_pos: float) -> KalmanState:
    mean = np.zeros((4, 2))
    mean[0] = z_pos
    mean[2] = z_pos
    mean[3] = -z_pos
    cov = np.diag([max(r_pos, 1e-6), 500.0**2, 25.0, 25.0])
    return KalmanState(mean=mean, cov=cov)


def opkf_step(
    state: KalmanState | None,
    z_pos: np.ndarray | None,
    z_vel: np.ndarray | None,
    event: EventKind,
    cfg: OpkfConfig,
    matrices: _RegimeMatrices | None = None,
) -> tuple[KalmanState | None, np.ndarray | None]:
    """One filter step: predict, update if measurable, emit the PI-ahead position.

    ``state`` None means not yet initialized: the first valid position
    initializes the filter. Invalid measurements (z_pos None) coast. Returns
    (new state, predicted (x, y) at t+PI or None before initialization).
    """
    m = matrices if matrices is not None else _RegimeMatrices(cfg, (cfg.pi_ms,))
    r_pos, r_vel = cfg.measurement_noise()

    if state is None:
        if z_pos is None:
            return None, None
        state = _initial_state(np.asarray(z_pos, dtype=float), r_pos)
        mean, cov = state.mean, state.cov
    else:
        saccade = event is EventKind.SACCADE
        phi, q = m.pick(saccade)
        mean, cov = kalman_predict(state.mean, state.cov, phi, q)
        if z_pos is not None:
            if z_vel is not None:
                z = np.vstack([z_pos, z_vel])
                mean, cov = kalman_update(mean, cov, z, H_POSVEL, np.diag([r_pos, r_vel]))
            else:
                mean, cov = kalman_update(
                    mean, cov, np.asarray(z_pos, dtype=float)[None, :], H_POS, np.array([[r_pos]])
                )

    if not np.all(np.isfinite(mean)):
        raise InstabilityError("filter mean diverged")
    new_state = KalmanState(mean=mean, cov=cov)
    row = m.pi_rows[(event is EventKind.SACCADE, cfg.pi_ms)]
    return new_state, row @ mean


def _labels_from_segments(segs: list[EventSegment], n: int) -> np.ndarray:
    lab = np.zeros(n, dtype=bool)
    for seg in segs:
        if seg.kind is EventKind.SACCADE:
            lab[seg.start_idx : seg.end_idx + 1] = True
    return lab


def opkf_predict_multi(
    rec: GazeRecording,
    cfg: OpkfConfig,
    pi_list: tuple[int, ...],
    vel: VelocityTrace | None = None,
    segs: list[EventSegment] | None = None,
) -> dict[int, PredictionRun]:
    """One causal filter pass, predictions for every PI in pi_list.

    The measurement velocity is always the causal right-edge differentiator
    computed here unless ``vel`` overrides it. With the default
    regime_source="online" the event regime comes from a zero-lookahead
    labeler on that causal velocity; "segments" instead consumes the offline
    labels in ``segs`` (which look ahead, breaking causality — analysis use).
    """
    n = rec.n_samples
    if vel is None:
        vel = compute_velocity(rec, DiffConfig(mode="causal"))
    if len(vel.vx) != n:
        raise ConfigError("velocity trace misaligned with recording")
    if cfg.regime_source == "segments":
        if segs is None:
            raise ConfigError('regime_source="segments" needs segs')
        offline_saccade = _labels_from_segments(segs, n)
    else:
        offline_saccade = None
    labeler = CausalLabeler(cfg.classifier)

    matrices = _RegimeMatrices(cfg, tuple(pi_list))
    r_pos, r_vel = cfg.measurement_noise()
    r_full = np.diag([r_pos, r_vel])
    r_pos_only = np.array([[r_pos]])

    preds = {pi: np.full((n, 2), np.nan) for pi in pi_list}
    issued = np.zeros(n, dtype=bool)

    mean = None
    cov = None
    for i in range(n):
        sample_ok = bool(rec.valid[i])
        vel_ok = bool(vel.valid[i])
        v_r = float(vel.v_radial[i]) if vel_ok else float("nan")
        if offline_saccade is not None:
            event = EventKind.SACCADE if offline_saccade[i] else EventKind.FIXATION
            if not sample_ok:
                event = EventKind.BLINK
        else:
            event = labeler.update(v_r, vel_ok, sample_ok)
        saccade = event is EventKind.SACCADE

        if mean is None:
            if not sample_ok:
                continue
            state = _initial_state(np.array([rec.x[i], rec.y[i]]), r_pos)
            mean, cov = state.mean, state.cov
        else:
            phi, q = matrices.pick(saccade)
            mean, cov = kalman_predict(mean, cov, phi, q)
            if sample_ok:
                z_pos = np.array([rec.x[i], rec.y[i]])
                if vel_ok:
                    z = np.vstack([z_pos, [vel.vx[i], vel.vy[i]]])
                    mean, cov = kalman_update(mean, cov, z, H_POSVEL, r_full)
                else:
                    mean, cov = kalman_update(mean, cov, z_pos[None, :], H_POS, r_pos_only)

        if not np.all(np.isfinite(mean)):
            raise InstabilityError(f"filter diverged at sample {i}")
        issued[i] = sample_ok
        for pi in pi_list:
            preds[pi][i] = matrices.pi_rows[(saccade, pi)] @ mean

    runs = {}
    for pi in pi_list:
        mask = issued.copy()
        target_ok = np.zeros(n, dtype=bool)
        if pi < n:
            target_ok[: n - pi] = rec.valid[pi:]
        mask &= target_ok
        runs[pi] = PredictionRun(
            predictor_id="opkf", pi_ms=pi, predicted=preds[pi], valid_mask=mask
        )
    return runs


def opkf_predict_recording(
    rec: GazeRecording,
    vel: VelocityTrace | None = None,
    segs: list[EventSegment] | None = None,
    cfg: OpkfConfig = OpkfConfig(),
) -> PredictionRun:
    """Causal single-PI prediction pass over a whole recording."""
    return opkf_predict_multi(rec, cfg, (cfg.pi_ms,), vel=vel, segs=segs)[cfg.pi_ms]


# ---------------------------------------------------------------------------
# Nelder-Mead


@dataclass(frozen=True)
class NMResult:
    x: np.ndarray
    fun: float
    n_evals: int
    converged: bool


def nelder_mead(
    objective,
    x0,
    max_evals: int | None = None,
    size_tol: float = 1e-6,
) -> NMResult:
    """Downhill simplex: reflect / expand / contract / shrink.

    Stops when the simplex's relative size drops below size_tol or the
    evaluation budget (default 500 per dimension) runs out; always returns
    the best vertex seen. Vertices where the objective is non-finite act as
    infinite barriers; if the whole initial simplex is non-finite, that is an
    initialization error.
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    if n < 1:
        raise ConfigError("need at least one parameter")
    budget = max_evals if max_evals is not None else 500 * n
    evals = 0

    def f(x):
        nonlocal evals
        evals += 1
        try:
            v = float(objective(x))
        except (ArithmeticError, ValueError):
            return np.inf
        return v if np.isfinite(v) else np.inf

    simplex = [x0.copy()]
    for i in range(n):
        step = 0.05 * abs(x0[i]) if x0[i] != 0 else 0.00025
        v = x0.copy()
        v[i] += step
        simplex.append(v)
    simplex = np.array(simplex)
    fvals = np.array([f(v) for v in simplex])
    if not np.isfinite(fvals).any():
        raise FitError("objective non-finite over the whole initial simplex")

    alpha, gamma, rho, sigma = 1.0, 2.0, 0.5, 0.5
    converged = False
    while evals < budget:
        order = np.argsort(fvals, kind="stable")
        simplex = simplex[order]
        fvals = fvals[order]
        best = simplex[0]
        size = np.max(np.abs(simplex[1:] - best)) / max(1.0, np.max(np.abs(best)))
        if size < size_tol:
            converged = True
            break
        centroid = simplex[:-1].mean(axis=0)
        xr = centroid + alpha * (centroid - simplex[-1])
        fr = f(xr)
        if fr < fvals[0]:
            xe = centroid + gamma * (xr - centroid)
            fe = f(xe)
            if fe < fr:
                simplex[-1], fvals[-1] = xe, fe
            else:
                simplex[-1], fvals[-1] = xr, fr
        elif fr < fvals[-2]:
            simplex[-1], fvals[-1] = xr, fr
        else:
            if fr < fvals[-1]:
                xc = centroid + rho * (xr - centroid)
            else:
                xc = centroid + rho * (simplex[-1] - centroid)
            fc = f(xc)
            if fc < min(fr, fvals[-1]):
                simplex[-1], fvals[-1] = xc, fc
            else:
                for i in range(1, n + 1):
                    simplex[i] = simplex[0] + sigma * (simplex[i] - simplex[0])
                    fvals[i] = f(simplex[i])

    order = np.argsort(fvals, kind="stable")
    return NMResult(
        x=simplex[order[0]].copy(),
        fun=float(fvals[order[0]]),
        n_evals=evals,
        converged=converged,
    )


# ---------------------------------------------------------------------------
# per-subject parameter fitting

FIT_FIELDS = (
    "Kse",
    "Klt",
    "Bag",
    "Bant",
    "tau_ag_act",
    "pulse_height_coeff",
    "pulse_width_coeff",
)
CALIBRATION_FRACTION = 0.4
CEP_TAIL_MS = 100


@dataclass(frozen=True)
class FitOutcome:
    params: PlantParams
    cal_error: float
    base_error: float
    n_evals: int
    converged: bool


def _params_from_log(base: PlantParams, theta: np.ndarray) -> PlantParams:
    values = dict(zip(FIT_FIELDS, np.exp(theta)))
    return replace(base, **values)


def fit_subject_params(
    rec: GazeRecording,
    vel: VelocityTrace | None,
    segs: list[EventSegment],
    base: PlantParams = DEFAULT_PARAMS,
    cfg: OpkfConfig = OpkfConfig(),
    max_evals: int = 200,
) -> FitOutcome:
    """Nelder-Mead over log-scaled plant parameters on a calibration slice.

    The calibration slice is the first 40% of detected saccades plus a
    100 ms tail after each; the objective is the mean PI-ahead error over
    samples whose target time falls in that slice, filtering from the start
    of the recording. Returns the fitted parameters only when they do not
    score worse than the base set on calibration.
    """
    sacc = [s for s in segs if s.kind is EventKind.SACCADE]
    if len(sacc) < 10:
        raise InsufficientDataError(f"need >= 10 saccades to fit, got {len(sacc)}")
    n_cal = max(1, int(CALIBRATION_FRACTION * len(sacc)))
    cal = sacc[:n_cal]
    n = rec.n_samples
    cal_end = min(cal[-1].end_idx + CEP_TAIL_MS + cfg.pi_ms + 1, n)

    target_mask = np.zeros(n, dtype=bool)
    for s in cal:
        target_mask[s.start_idx : min(s.end_idx + CEP_TAIL_MS + 1, n)] = True
    target_mask &= rec.valid

    prefix = GazeRecording(
        subject_id=rec.subject_id,
        session_id=rec.session_id,
        t_ms=rec.t_ms[:cal_end],
        x=rec.x[:cal_end],
        y=rec.y[:cal_end],
        valid=rec.valid[:cal_end],
        targets=rec.targets,
    )

    def objective_for(params: PlantParams) -> float:
        run = opkf_predict_multi(prefix, replace(cfg, params=params), (cfg.pi_ms,))[cfg.pi_ms]
        pi = cfg.pi_ms
        idx = np.flatnonzero(run.valid_mask)  # run.valid_mask already needs idx+pi < cal_end
        idx = idx[target_mask[idx + pi]]
        if idx.size == 0:
            raise InsufficientDataError("no calibration samples to score")
        err = np.hypot(
            run.predicted[idx, 0] - rec.x[idx + pi],
            run.predicted[idx, 1] - rec.y[idx + pi],
        )
        return float(np.mean(err))

    def objective(theta: np.ndarray) -> float:
        try:
            params = _params_from_log(base, theta)
        except ConfigError:
            return np.inf
        try:
            return objective_for(params)
        except InstabilityError:
            return np.inf

    x0 = np.log([getattr(base, name) for name in FIT_FIELDS])
    base_error = objective_for(base)
    result = nelder_mead(objective, x0, max_evals=max_evals)
    fitted = _params_from_log(base, result.x)
    if result.fun <= base_error:
        return FitOutcome(
            params=fitted,
            cal_error=result.fun,
            base_error=base_error,
            n_evals=result.n_evals,
            converged=result.converged,
        )
    return FitOutcome(
        params=base,
        cal_error=base_error,
        base_error=base_error,
        n_evals=result.n_evals,
        converged=result.converged,
    )


def save_fits(fits: dict[str, FitOutcome], path) -> None:
    data = {}
    for subject_id, fit in fits.items():
        data[subject_id] = {
            "params": json.loads(fit.params.to_json()),
            "cal_error": fit.cal_error,
            "base_error": fit.base_error,
            "n_evals": fit.n_evals,
            "converged": fit.converged,
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2)


def load_fits(path) -> dict[str, FitOutcome]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    out = {}
    for subject_id, row in data.items():
        out[subject_id] = FitOutcome(
            params=PlantParams.from_json(json.dumps(row["params"])),
            cal_error=float(row["cal_error"]),
            base_error=float(row["base_error"]),
            n_evals=int(row["n_evals"]),
            converged=bool(row["converged"]),
        )
    return out
