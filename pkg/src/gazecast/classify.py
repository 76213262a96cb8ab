"""Velocity-threshold event segmentation.

A two-threshold seed-and-expand pass over radial velocity: runs exceeding
the peak threshold seed saccades, each seed grows outward while velocity
stays at or above the onset/offset threshold, and duration limits weed out
spikes and drifts. Invalid samples become blinks; what remains is fixation
when long enough, Other when not. Every sample ends up in exactly one
segment and segments tile the recording in order.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from .errors import AlignmentError, ConfigError, InsufficientDataError
from .signal import GazeRecording, VelocityTrace

SMALL_LARGE_SPLIT_DVA = 10.0


class EventKind(str, Enum):
    FIXATION = "Fixation"
    SACCADE = "Saccade"
    BLINK = "Blink"
    OTHER = "Other"


@dataclass(frozen=True)
class SaccadeProps:
    amplitude_dva: float
    duration_ms: int
    peak_vel: float
    mean_vel: float
    sample_count: int


@dataclass(frozen=True)
class EventSegment:
    kind: EventKind
    start_idx: int
    end_idx: int
    props: SaccadeProps | None = None

    @property
    def n_samples(self) -> int:
        return self.end_idx - self.start_idx + 1


@dataclass(frozen=True)
class ClassifierConfig:
    peak_threshold: float = 100.0
    onset_offset_threshold: float = 20.0
    min_saccade_ms: int = 6
    min_fixation_ms: int = 40
    max_saccade_ms: int = 150

    def __post_init__(self):
        if not self.peak_threshold > self.onset_offset_threshold > 0:
            raise ConfigError(
                "thresholds must satisfy peak > onset/offset > 0, got "
                f"{self.peak_threshold} / {self.onset_offset_threshold}"
            )
        if self.min_saccade_ms < 1 or self.min_fixation_ms < 1:
            raise ConfigError("minimum durations must be >= 1 ms")
        if self.max_saccade_ms < self.min_saccade_ms:
            raise ConfigError("max_saccade_ms must be >= min_saccade_ms")


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Maximal [start, end] index runs where mask is True."""
    if mask.size == 0:
        return []
    padded = np.concatenate(([False], mask, [False]))
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return [(int(edges[i]), int(edges[i + 1]) - 1) for i in range(0, edges.size, 2)]


def classify_events(
    rec: GazeRecording,
    vel: VelocityTrace,
    cfg: ClassifierConfig = ClassifierConfig(),
) -> list[EventSegment]:
    """Segment a recording into Fixation / Saccade / Blink / Other."""
    n = rec.n_samples
    if len(vel.v_radial) != n:
        raise AlignmentError(f"velocity trace has {len(vel.v_radial)} entries for {n} samples")

    # label codes: -1 unassigned, 0 fixation, 1 saccade, 2 blink, 3 other
    labels = np.full(n, -1, dtype=np.int8)
    labels[~rec.valid] = 2

    v = vel.v_radial
    seeds = vel.valid & (v > cfg.peak_threshold)
    grow = vel.valid & (v >= cfg.onset_offset_threshold)

    for start, end in _runs(grow):
        if not seeds[start : end + 1].any():
            continue
        dur = end - start + 1
        labels[start : end + 1] = 1 if cfg.min_saccade_ms <= dur <= cfg.max_saccade_ms else 3

    for start, end in _runs(labels == -1):
        dur = end - start + 1
        labels[start : end + 1] = 0 if dur >= cfg.min_fixation_ms else 3

    segments: list[EventSegment] = []
    kind_of = {0: EventKind.FIXATION, 1: EventKind.SACCADE, 2: EventKind.BLINK, 3: EventKind.OTHER}
    boundaries = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries - 1, [n - 1]))
    for s, e in zip(starts, ends):
        kind = kind_of[int(labels[s])]
        props = None
        if kind is EventKind.SACCADE:
            seg_v = v[s : e + 1]
            props = SaccadeProps(
                amplitude_dva=float(np.hypot(rec.x[e] - rec.x[s], rec.y[e] - rec.y[s])),
                duration_ms=int(e - s + 1),
                peak_vel=float(np.max(seg_v)),
                mean_vel=float(np.mean(seg_v)),
                sample_count=int(e - s + 1),
            )
        segments.append(EventSegment(kind=kind, start_idx=int(s), end_idx=int(e), props=props))
    return segments


def saccade_class(amplitude_dva: float) -> str:
    """Amplitude split used throughout the evaluation: >= 10 dva is 'large'."""
    return "large" if amplitude_dva >= SMALL_LARGE_SPLIT_DVA else "small"


def fixation_noise_threshold(
    rec: GazeRecording, vel: VelocityTrace, segs: list[EventSegment]
) -> float:
    """90th percentile of radial velocity over valid fixation samples."""
    n = rec.n_samples
    if len(vel.v_radial) != n:
        raise AlignmentError("velocity trace misaligned with recording")
    mask = np.zeros(n, dtype=bool)
    for seg in segs:
        if seg.kind is EventKind.FIXATION:
            mask[seg.start_idx : seg.end_idx + 1] = True
    mask &= vel.valid
    values = vel.v_radial[mask]
    if values.size < 100:
        raise InsufficientDataError(
            f"need >= 100 valid fixation samples for the noise threshold, got {values.size}"
        )
    from .metrics import quantile  # deferred: metrics consumes this module's segments

    return quantile(values, 0.9)


class CausalLabeler:
    """Online single-pass event labeler for live prediction.

    Hysteresis version of the offline classifier: a sample with velocity
    above the peak threshold flips the state to Saccade, and it stays there
    until velocity drops below the onset/offset threshold. Samples with no
    velocity estimate keep the previous state (Blink when the sample itself
    is invalid). Never looks ahead, so labels at time t depend only on
    samples <= t.
    """

    def __init__(self, cfg: ClassifierConfig = ClassifierConfig()):
        self.cfg = cfg
        self._in_saccade = False

    def reset(self) -> None:
        self._in_saccade = False

    def update(self, v_radial: float, vel_valid: bool, sample_valid: bool) -> EventKind:
        if not sample_valid:
            self._in_saccade = False
            return EventKind.BLINK
        if vel_valid:
            if self._in_saccade:
                if v_radial < self.cfg.onset_offset_threshold:
                    self._in_saccade = False
            elif v_radial > self.cfg.peak_threshold:
                self._in_saccade = True
        return EventKind.SACCADE if self._in_saccade else EventKind.FIXATION


def segments_to_json(segs: list[EventSegment]) -> str:
    rows = []
    for seg in segs:
        rows.append(
            {
                "kind": seg.kind.value,
                "start_idx": seg.start_idx,
                "end_idx": seg.end_idx,
                "props": asdict(seg.props) if seg.props is not None else None,
            }
        )
    return json.dumps(rows, indent=2)


def segments_from_json(text: str) -> list[EventSegment]:
    segs = []
    for row in json.loads(text):
        props = SaccadeProps(**row["props"]) if row.get("props") else None
        segs.append(
            EventSegment(
                kind=EventKind(row["kind"]),
                start_idx=int(row["start_idx"]),
                end_idx=int(row["end_idx"]),
                props=props,
            )
        )
    return segs


def kind_labels(segs: list[EventSegment], n: int) -> np.ndarray:
    """Per-sample EventKind array expanded from segments."""
    out = np.empty(n, dtype=object)
    for seg in segs:
        out[seg.start_idx : seg.end_idx + 1] = seg.kind
    return out
