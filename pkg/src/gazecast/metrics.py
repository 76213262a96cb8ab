"""Event-conditioned error analysis and the rank statistics behind it.

The first half of this module is small, self-contained statistics
(quantiles, Spearman correlation, Bonferroni flags, Kendall's W) written
directly from their defining formulas so every published number can be
reproduced bit-for-bit from exported error records. The second half scores
prediction runs against ground truth and aggregates errors per event class,
subject, and saccade phase.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from scipy.special import stdtr

from .classify import EventKind, EventSegment, saccade_class
from .errors import (
    AlignmentError,
    ConfigError,
    EmptyInputError,
    InsufficientDataError,
    UndefinedStatisticError,
)


# ---------------------------------------------------------------------------
# rank/statistics primitives


def quantile(values, p: float) -> float:
    """Order-statistic quantile with linear interpolation at rank (n-1)*p."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"quantile level must be in [0, 1], got {p}")
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise InsufficientDataError("quantile of empty data")
    v = np.sort(v)
    h = (v.size - 1) * p
    lo = int(np.floor(h))
    hi = min(lo + 1, v.size - 1)
    frac = h - lo
    return float(v[lo] + frac * (v[hi] - v[lo]))


def iqr(values) -> float:
    return quantile(values, 0.75) - quantile(values, 0.25)


def rankdata(values) -> np.ndarray:
    """1-based ranks with ties assigned the average of their positions."""
    v = np.asarray(values, dtype=float)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=float)
    sv = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sv[j + 1] == sv[i]:
            j += 1
        # positions i..j (0-based) share the average of ranks i+1..j+1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> tuple[float, float]:
    """Spearman rank correlation with a Student-t p-value (n-2 dof).

    Ties get average ranks; r_s is the Pearson correlation of the ranks.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size != y.size:
        raise AlignmentError(f"length mismatch: {x.size} vs {y.size}")
    n = x.size
    if n < 5:
        raise InsufficientDataError(f"need at least 5 pairs, got {n}")
    rx = rankdata(x)
    ry = rankdata(y)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    sx = float(np.sqrt(np.sum(dx * dx)))
    sy = float(np.sqrt(np.sum(dy * dy)))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedStatisticError("correlation undefined for a constant input")
    r = float(np.sum(dx * dy) / (sx * sy))
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * np.sqrt((n - 2) / (1.0 - r * r))
    p = 2.0 * float(stdtr(n - 2, -abs(t)))
    return r, p


def bonferroni(p_values, alpha: float = 0.05, family_size: int | None = None) -> list[bool]:
    """Per-test significance flags at the alpha/m Bonferroni threshold.

    ``family_size`` lets the caller correct over a family larger than the
    p-values actually supplied; by default m = len(p_values).
    """
    p = list(p_values)
    if not p:
        raise EmptyInputError("no p-values to correct")
    m = family_size if family_size is not None else len(p)
    if m < 1:
        raise ConfigError(f"family size must be >= 1, got {m}")
    thr = alpha / m
    return [pi < thr for pi in p]


def kendall_w(scores) -> float:
    """Kendall's coefficient of concordance across raters, tie-corrected.

    ``scores`` is an (m raters x n subjects) array; each rater's scores are
    converted to average ranks. W = 12*S / (m^2*(n^3 - n) - m*sum(T)) where S
    is the squared deviation of rank sums and T the per-rater tie terms.
    """
    a = np.asarray(scores, dtype=float)
    if a.ndim != 2:
        raise ConfigError("scores must be a 2-D raters x subjects array")
    m, n = a.shape
    if m < 2:
        raise InsufficientDataError(f"need at least 2 raters, got {m}")
    if n < 3:
        raise InsufficientDataError(f"need at least 3 subjects, got {n}")
    ranks = np.empty_like(a)
    tie_total = 0.0
    for i in range(m):
        if np.all(a[i] == a[i, 0]):
            raise UndefinedStatisticError(f"rater {i} ranks all subjects equal")
        ranks[i] = rankdata(a[i])
        _, counts = np.unique(a[i], return_counts=True)
        tie_total += float(np.sum(counts.astype(float) ** 3 - counts))
    rank_sums = ranks.sum(axis=0)
    s = float(np.sum((rank_sums - rank_sums.mean()) ** 2))
    denom = m * m * (n**3 - n) - m * tie_total
    if denom <= 0:
        raise UndefinedStatisticError("concordance undefined: ties exhaust all variance")
    return 12.0 * s / denom


def cdf_curve(errors, grid) -> np.ndarray:
    """Proportion of errors <= each grid level."""
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        raise InsufficientDataError("cdf of empty errors")
    g = np.asarray(grid, dtype=float)
    e = np.sort(e)
    return np.searchsorted(e, g, side="right") / e.size


# ---------------------------------------------------------------------------
# scoring prediction runs against labeled recordings


class ErrorRecord(NamedTuple):
    """One scored prediction, indexed by the sample it predicted (t + PI).

    Event kind and saccade class describe that target sample, so a
    prediction issued during fixation that lands inside a saccade counts
    against the saccade.
    """

    sample_idx: int
    event_kind: EventKind
    saccade_class: str  # "small" | "large" | "none"
    error_dva: float


EVENT_CLASSES = ("fixation", "small_saccade", "large_saccade", "cep", "all")

CEP_WINDOW_MS = 100


def _check_tiling(segs: Sequence[EventSegment], n: int) -> None:
    if not segs:
        raise EmptyInputError("no segments")
    if segs[0].start_idx != 0 or segs[-1].end_idx != n - 1:
        raise AlignmentError(
            f"segments cover [{segs[0].start_idx}, {segs[-1].end_idx}], recording has {n} samples"
        )


def score_run(run, rec, segs: Sequence[EventSegment]) -> list[ErrorRecord]:
    """Score every unmasked prediction of a run against the recording.

    ``run`` is any PredictionRun-shaped object: ``predicted`` (n, 2),
    ``valid_mask`` (n,), ``pi_ms``; row i targets sample i + pi_ms.
    """
    n = len(rec.x)
    pred = np.asarray(run.predicted, dtype=float)
    mask = np.asarray(run.valid_mask, dtype=bool)
    if pred.shape != (n, 2) or mask.shape != (n,):
        raise AlignmentError(
            f"run shaped {pred.shape}/{mask.shape} does not align with {n}-sample recording"
        )
    _check_tiling(segs, n)
    pi = int(run.pi_ms)

    kind_of = np.empty(n, dtype=object)
    cls_of = np.full(n, "none", dtype=object)
    for s in segs:
        kind_of[s.start_idx : s.end_idx + 1] = s.kind
        if s.kind == EventKind.SACCADE:
            cls_of[s.start_idx : s.end_idx + 1] = saccade_class(s.props.amplitude_dva)

    idx = np.flatnonzero(mask)
    tgt = idx + pi
    if tgt.size and tgt[-1] >= n:
        raise AlignmentError(f"prediction at {idx[-1]} targets sample {tgt[-1]} beyond the recording")
    # a target sample with no ground truth cannot be scored; well-behaved
    # producers already exclude these from valid_mask
    ok = rec.valid[tgt]
    idx, tgt = idx[ok], tgt[ok]
    err = np.hypot(pred[idx, 0] - rec.x[tgt], pred[idx, 1] - rec.y[tgt])
    return [
        ErrorRecord(int(t), kind_of[t], str(cls_of[t]), float(e))
        for t, e in zip(tgt, err)
    ]


def cep_intervals(segs: Sequence[EventSegment]) -> list[tuple[int, int]]:
    """Post-saccadic windows: [end+1, end+100], cut at the next saccade or blink.

    Windows are truncated at the recording end; a window fully consumed by an
    immediately following saccade or blink is dropped.
    """
    if not segs:
        return []
    n = segs[-1].end_idx + 1
    out = []
    for i, s in enumerate(segs):
        if s.kind != EventKind.SACCADE:
            continue
        start = s.end_idx + 1
        end = min(s.end_idx + CEP_WINDOW_MS, n - 1)
        for nxt in segs[i + 1 :]:
            if nxt.start_idx > end:
                break
            if nxt.kind in (EventKind.SACCADE, EventKind.BLINK):
                end = nxt.start_idx - 1
                break
        if start <= end:
            out.append((start, end))
    return out


def class_errors(records: Sequence[ErrorRecord], segs: Sequence[EventSegment]) -> dict[str, np.ndarray]:
    """Split scored errors into the five reporting classes.

    "cep" selects records inside post-saccadic windows regardless of their
    own event kind (the windows already stop at the next saccade or blink);
    the other classes select by the record's target-sample label.
    """
    if not records:
        empty = np.empty(0, dtype=float)
        return {name: empty.copy() for name in EVENT_CLASSES}
    if segs:
        n = segs[-1].end_idx + 1
        in_cep = np.zeros(n, dtype=bool)
        for a, b in cep_intervals(segs):
            in_cep[a : b + 1] = True
    else:
        in_cep = np.zeros(0, dtype=bool)
    err = np.array([r.error_dva for r in records], dtype=float)
    # compare by .value: numpy coerces a str-enum scalar via str(), which
    # yields the qualified name rather than the payload
    kinds = np.array([r.event_kind.value for r in records])
    cls = np.array([r.saccade_class for r in records])
    idxs = np.array([r.sample_idx for r in records], dtype=int)
    sac = kinds == EventKind.SACCADE.value
    return {
        "fixation": err[kinds == EventKind.FIXATION.value],
        "small_saccade": err[sac & (cls == "small")],
        "large_saccade": err[sac & (cls == "large")],
        "cep": err[in_cep[idxs]] if len(records) else err[:0],
        "all": err,
    }


def saccade_progress_curve(
    records: Sequence[ErrorRecord],
    segs: Sequence[EventSegment],
    n_bins: int = 10,
    amp_range: tuple[float, float] = (10.0, 20.0),
) -> np.ndarray:
    """Median error per normalized-saccade-time bin, amplitude-gated.

    Each record inside a qualifying saccade maps to progress
    (idx - start) / (duration - 1) in [0, 1]; empty bins come back NaN.
    """
    if n_bins < 2:
        raise ConfigError(f"need at least 2 bins, got {n_bins}")
    lo, hi = amp_range
    spans = [
        (s.start_idx, s.end_idx)
        for s in segs
        if s.kind == EventKind.SACCADE and lo <= s.props.amplitude_dva <= hi
    ]
    if len(spans) < 5:
        raise InsufficientDataError(
            f"need >= 5 saccades with amplitude in [{lo}, {hi}], got {len(spans)}"
        )
    per_bin: list[list[float]] = [[] for _ in range(n_bins)]
    starts = np.array([a for a, _ in spans])
    ends = np.array([b for _, b in spans])
    for r in records:
        k = np.searchsorted(starts, r.sample_idx, side="right") - 1
        if k < 0 or r.sample_idx > ends[k]:
            continue
        dur = ends[k] - starts[k]
        progress = (r.sample_idx - starts[k]) / dur if dur > 0 else 0.0
        b = min(int(progress * n_bins), n_bins - 1)
        per_bin[b].append(r.error_dva)
    return np.array([float(np.median(v)) if v else np.nan for v in per_bin])


# ---------------------------------------------------------------------------
# cohort aggregation


@dataclass(frozen=True)
class SubjectStats:
    """Per-subject error spread in one event class, plus cohort-level spread.

    The cohort ratio is max/min of the per-subject medians (Inf when some
    subject's median is exactly zero).
    """

    event_class: str
    subject_ids: tuple[str, ...]
    medians: tuple[float, ...]
    iqrs: tuple[float, ...]
    mins: tuple[float, ...]
    maxs: tuple[float, ...]
    cohort_min: float
    cohort_max: float
    cohort_ratio: float
    cohort_iqr: float


def subject_stats(
    per_subject_errors: Mapping[str, Sequence[float]],
    event_class: str,
    min_records: int = 30,
) -> SubjectStats:
    """Cohort statistics over per-subject medians for one event class.

    Subjects with fewer than ``min_records`` errors in the class are
    dropped; at least one subject must survive.
    """
    if event_class not in EVENT_CLASSES:
        raise ConfigError(f"unknown event class {event_class!r}, expected one of {EVENT_CLASSES}")
    ids, meds, iqrs_, mins_, maxs_ = [], [], [], [], []
    for sid in sorted(per_subject_errors):
        e = np.asarray(per_subject_errors[sid], dtype=float)
        if e.size < min_records:
            continue
        ids.append(sid)
        meds.append(quantile(e, 0.5))
        iqrs_.append(iqr(e))
        mins_.append(float(e.min()))
        maxs_.append(float(e.max()))
    if not ids:
        raise InsufficientDataError(
            f"no subject has >= {min_records} records in class {event_class!r}"
        )
    mn, mx = min(meds), max(meds)
    return SubjectStats(
        event_class=event_class,
        subject_ids=tuple(ids),
        medians=tuple(meds),
        iqrs=tuple(iqrs_),
        mins=tuple(mins_),
        maxs=tuple(maxs_),
        cohort_min=mn,
        cohort_max=mx,
        cohort_ratio=mx / mn if mn > 0 else float("inf"),
        cohort_iqr=iqr(meds) if len(meds) > 1 else 0.0,
    )


@dataclass(frozen=True)
class CorrelationResult:
    feature: str
    model: str
    event_class: str
    r_s: float
    p_value: float
    significant_after_bonferroni: bool


def correlate_features(
    features: Mapping[str, Sequence[float]],
    medians: Mapping[str, Sequence[float]],
    event_class: str,
    alpha: float = 0.05,
    family_size: int | None = None,
) -> list[CorrelationResult]:
    """Spearman of every (feature, model) pair with family-wise Bonferroni.

    ``features`` maps feature name -> per-subject values and ``medians``
    maps model name -> per-subject error medians, in one shared subject
    order. The correction family defaults to all pairs tested here;
    ``family_size`` widens it when this call is one slice of a larger table.
    """
    if not features or not medians:
        raise EmptyInputError("need at least one feature and one model")
    sizes = {len(v) for v in features.values()} | {len(v) for v in medians.values()}
    if len(sizes) != 1:
        raise AlignmentError(f"feature/median vectors disagree on subject count: {sorted(sizes)}")
    n = sizes.pop()
    if n < 10:
        raise InsufficientDataError(f"need >= 10 complete subjects, got {n}")
    pairs = [(f, m) for f in sorted(features) for m in sorted(medians)]
    rs, ps = [], []
    for f, m in pairs:
        r, p = spearman(features[f], medians[m])
        rs.append(r)
        ps.append(p)
    flags = bonferroni(ps, alpha=alpha, family_size=family_size or len(pairs))
    return [
        CorrelationResult(f, m, event_class, r, p, bool(sig))
        for (f, m), r, p, sig in zip(pairs, rs, ps, flags)
    ]
