"""Per-subject oculomotor features and signal-quality measures.

These feed the correlation analysis: saccade-velocity features summarize how
fast a subject's saccades are, and the quality pair (accuracy, precision)
summarizes calibration offset and sample-to-sample noise. All are computed
from a classified recording and are deterministic given (rec, segs).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .classify import EventKind, EventSegment, fixation_noise_threshold
from .errors import ConfigError, InsufficientDataError
from .metrics import quantile
from .signal import GazeRecording, VelocityTrace

MIN_SACCADES = 10
MIN_FIXATION_SAMPLES = 100
TARGET_LOCK_RADIUS_DVA = 2.5
TARGET_LOCK_DELAY_MS = 100


@dataclass(frozen=True)
class SubjectFeatures:
    subject_id: str
    fix_noise_thr: float
    pk_vel_dur_ratio_r_md: float
    mn_vel_r_md: float
    accuracy_dva: float | None
    precision_dva: float


def _saccade_segs(segs: list[EventSegment]) -> list[EventSegment]:
    sacc = [s for s in segs if s.kind is EventKind.SACCADE]
    if len(sacc) < MIN_SACCADES:
        raise InsufficientDataError(f"need >= {MIN_SACCADES} saccades, got {len(sacc)}")
    return sacc


def pk_vel_dur_ratio_r_md(segs: list[EventSegment]) -> float:
    """Median across saccades of peak radial velocity / sample count."""
    sacc = _saccade_segs(segs)
    return quantile([s.props.peak_vel / s.props.sample_count for s in sacc], 0.5)


def mn_vel_r_md(
    segs: list[EventSegment],
    vel: VelocityTrace | None = None,
    reading: str = "median_of_means",
) -> float:
    """Median across saccades of the per-saccade mean radial velocity.

    ``reading="mean_of_medians"`` computes the alternative aggregation (mean
    across saccades of per-saccade median velocity) and needs the velocity
    trace, since segment props carry only mean and peak.
    """
    sacc = _saccade_segs(segs)
    if reading == "median_of_means":
        return quantile([s.props.mean_vel for s in sacc], 0.5)
    if reading == "mean_of_medians":
        if vel is None:
            raise ConfigError("mean_of_medians needs the velocity trace")
        meds = [
            quantile(vel.v_radial[s.start_idx : s.end_idx + 1], 0.5) for s in sacc
        ]
        return float(np.mean(meds))
    raise ConfigError(f"unknown reading {reading!r}")


def data_quality(
    rec: GazeRecording, segs: list[EventSegment]
) -> tuple[float | None, float]:
    """(accuracy, precision) signal-quality pair.

    Accuracy is the mean centroid-to-target distance over target-locked
    fixations (centroid within 2.5 dva of the concurrent target, fixation
    begins at least 100 ms after that target appeared); None when the
    recording has no target log. Precision is RMS sample-to-sample radial
    displacement over fixation samples, diffs never crossing segment edges.
    """
    sq_disp: list[np.ndarray] = []
    offsets: list[float] = []
    have_targets = rec.targets is not None and len(rec.targets) > 0
    for seg in segs:
        if seg.kind is not EventKind.FIXATION:
            continue
        sl = slice(seg.start_idx, seg.end_idx + 1)
        ok = rec.valid[sl]
        x = rec.x[sl][ok]
        y = rec.y[sl][ok]
        if x.size >= 2:
            sq_disp.append(np.diff(x) ** 2 + np.diff(y) ** 2)
        if have_targets and x.size > 0:
            t_start = int(rec.t_ms[seg.start_idx])
            tgt = rec.target_at(t_start)
            if tgt is None:
                continue
            tgt_idx = int(np.searchsorted(rec.targets[:, 0], t_start, side="right")) - 1
            tgt_onset = float(rec.targets[tgt_idx, 0])
            if t_start - tgt_onset < TARGET_LOCK_DELAY_MS:
                continue
            cx, cy = float(np.mean(x)), float(np.mean(y))
            dist = float(np.hypot(cx - tgt[0], cy - tgt[1]))
            if dist <= TARGET_LOCK_RADIUS_DVA:
                offsets.append(dist)

    if not sq_disp:
        raise InsufficientDataError("no fixation sample pairs for precision")
    precision = float(np.sqrt(np.mean(np.concatenate(sq_disp))))
    if not have_targets:
        return None, precision
    if not offsets:
        raise InsufficientDataError("no target-locked fixations for accuracy")
    return float(np.mean(offsets)), precision


def subject_features(
    rec: GazeRecording, vel: VelocityTrace, segs: list[EventSegment]
) -> SubjectFeatures:
    """Feature bundle for one subject; raises when event counts fall short."""
    n_fix = sum(
        s.n_samples for s in segs if s.kind is EventKind.FIXATION
    )
    if n_fix < MIN_FIXATION_SAMPLES:
        raise InsufficientDataError(
            f"need >= {MIN_FIXATION_SAMPLES} fixation samples, got {n_fix}"
        )
    accuracy, precision = data_quality(rec, segs)
    return SubjectFeatures(
        subject_id=rec.subject_id,
        fix_noise_thr=fixation_noise_threshold(rec, vel, segs),
        pk_vel_dur_ratio_r_md=pk_vel_dur_ratio_r_md(segs),
        mn_vel_r_md=mn_vel_r_md(segs),
        accuracy_dva=accuracy,
        precision_dva=precision,
    )


FEATURE_COLUMNS = [
    "subject_id",
    "fix_noise_thr",
    "pk_vel_dur_ratio_r_md",
    "mn_vel_r_md",
    "accuracy_dva",
    "precision_dva",
]


def write_features_csv(rows: list[SubjectFeatures], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(FEATURE_COLUMNS)
        for r in rows:
            writer.writerow(
                [
                    r.subject_id,
                    repr(r.fix_noise_thr),
                    repr(r.pk_vel_dur_ratio_r_md),
                    repr(r.mn_vel_r_md),
                    "" if r.accuracy_dva is None else repr(r.accuracy_dva),
                    repr(r.precision_dva),
                ]
            )


def read_features_csv(path) -> list[SubjectFeatures]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(
                SubjectFeatures(
                    subject_id=row["subject_id"],
                    fix_noise_thr=float(row["fix_noise_thr"]),
                    pk_vel_dur_ratio_r_md=float(row["pk_vel_dur_ratio_r_md"]),
                    mn_vel_r_md=float(row["mn_vel_r_md"]),
                    accuracy_dva=float(row["accuracy_dva"]) if row["accuracy_dva"] else None,
                    precision_dva=float(row["precision_dva"]),
                )
            )
    return out
