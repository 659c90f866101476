"""Localization error, detection and selection rates, CED curves, timing.

Errors are Euclidean distances in millimetres (pixel distance times pitch)
over landmarks visible in both the prediction and the annotation. Summary
statistics use the population standard deviation and are computed only on
records with a correct detection and a correct subset selection.
"""

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from .cascade import phase
from .landmarks import LANDMARK_NAMES

PHASES = ("select", "feature", "update")
PHASE_LABELS = {"select": "dm_selection", "feature": "feature_extraction", "update": "location_update"}


def localization_error(pred, gt, pitch=1.0):
    """Per-landmark errors in mm, ``nan`` where either side is invisible.

    ``pred`` may cover a subset of ``gt``'s landmarks; rows are matched
    through ``ids``.
    """
    if pitch <= 0:
        raise ValueError("pitch must be positive")
    try:
        g = gt.select(pred.ids)
    except ValueError as exc:
        raise ValueError(f"landmark ordering mismatch: {exc}") from None
    err = pitch * np.hypot(*(pred.points - g.points).T)
    return np.where(pred.visible & g.visible, err, np.nan)


def detection_ok(box, gt, margin=0.1):
    """Every visible ground-truth landmark inside ``box`` grown by ``margin``."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    pts = gt.points[gt.visible]
    return bool(np.all(box.expanded(margin).contains(pts))) if len(pts) else True


@dataclass
class EvalRecord:
    errors: np.ndarray  # (N_LANDMARKS,) mm, nan where excluded
    selected_subset: int = 0
    selection_correct: bool = True
    detection_ok: bool = True
    predict_time: float = 0.0
    name: str = ""

    def __post_init__(self):
        self.errors = np.asarray(self.errors, dtype=np.float64)
        if np.any(self.errors[~np.isnan(self.errors)] < 0):
            raise ValueError("errors must be non-negative")

    @property
    def mean_error(self):
        e = self.errors[~np.isnan(self.errors)]
        return float(e.mean()) if e.size else float("nan")


def make_record(pred, gt, pitch=1.0, subset=0, selection_correct=True, box=None,
                margin=0.1, predict_time=0.0, n_total=len(LANDMARK_NAMES), name=""):
    errors = np.full(n_total, np.nan)
    errors[pred.ids] = localization_error(pred, gt, pitch)
    ok = True if box is None else detection_ok(box, gt, margin)
    return EvalRecord(errors, subset, bool(selection_correct), ok, predict_time, name)


@dataclass
class EvalSummary:
    names: list
    mean: np.ndarray
    std: np.ndarray
    count: np.ndarray
    overall_mean: float
    overall_std: float
    n_records: int
    n_used: int
    detection_rate: float
    selection_rate: float
    ced_thresholds: np.ndarray = field(repr=False)
    ced_fraction: np.ndarray = field(repr=False)
    timing: dict = field(default_factory=dict)

    @property
    def empty(self):
        return self.n_used == 0


def ced(values, thresholds=None):
    """Cumulative fraction of ``values`` at or below each threshold."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if thresholds is None:
        top = float(np.ceil(v.max())) if v.size else 1.0
        thresholds = np.linspace(0.0, max(top, 1.0), 101)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if v.size == 0:
        return thresholds, np.zeros_like(thresholds)
    return thresholds, np.searchsorted(v, thresholds, side="right") / v.size


def summarize(records, names=LANDMARK_NAMES, thresholds=None):
    records = list(records)
    if not records:
        raise ValueError("summarize needs at least one record")
    n = len(records)
    det = 100.0 * sum(r.detection_ok for r in records) / n
    sel = 100.0 * sum(r.selection_correct for r in records) / n
    used = [r for r in records if r.detection_ok and r.selection_correct]
    L = len(names)
    if used:
        E = np.stack([r.errors for r in used])
        if E.shape[1] != L:
            raise ValueError(f"records carry {E.shape[1]} landmarks, names {L}")
        count = np.sum(~np.isnan(E), axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = np.nansum(E, axis=0) / count
            std = np.sqrt(np.nansum((E - mean) ** 2, axis=0) / count)
        flat = E[~np.isnan(E)]
        overall = (float(flat.mean()), float(flat.std())) if flat.size else (np.nan, np.nan)
        per_image = [r.mean_error for r in used if not np.isnan(r.mean_error)]
    else:
        count = np.zeros(L, dtype=np.int64)
        mean = std = np.full(L, np.nan)
        overall = (np.nan, np.nan)
        per_image = []
    t, f = ced(per_image, thresholds)
    return EvalSummary(list(names), mean, std, count, overall[0], overall[1], n, len(used),
                       det, sel, t, f)


def format_pm(mean, std):
    """One-decimal ``mean±std`` as in tabulated results."""
    if np.isnan(mean):
        return "n/a"
    return f"{mean:.1f}±{std:.1f}"


def _num(x):
    return "nan" if x is None or np.isnan(x) else f"{x:.6f}"


def summary_csv(summary, extra=None):
    """CSV text: one ``name,mean_mm,std_mm,n`` row per landmark, then footer rows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "mean_mm", "std_mm", "n"])
    for name, m, s, c in zip(summary.names, summary.mean, summary.std, summary.count):
        w.writerow([name, _num(m), _num(s), int(c)])
    if summary.empty:
        w.writerow(["overall", "nan", "nan", 0])
        w.writerow(["status", "no records passed detection and selection", "", 0])
    else:
        w.writerow(["overall", _num(summary.overall_mean), _num(summary.overall_std),
                    int(summary.count.sum())])
    w.writerow(["detection_rate_pct", _num(summary.detection_rate), "", summary.n_records])
    w.writerow(["selection_rate_pct", _num(summary.selection_rate), "", summary.n_records])
    for key in PHASES:
        if key in summary.timing:
            w.writerow([f"time_{PHASE_LABELS[key]}_s", _num(summary.timing[key]), "", summary.n_records])
    if "total" in summary.timing:
        w.writerow(["time_total_s", _num(summary.timing["total"]), "", summary.n_records])
    for key, value in (extra or {}).items():
        w.writerow([key, value, "", ""])
    return buf.getvalue()


def ced_csv(summary):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold_mm", "fraction"])
    for t, f in zip(summary.ced_thresholds, summary.ced_fraction):
        w.writerow([f"{t:.6f}", f"{f:.6f}"])
    return buf.getvalue()


def bench_predict(predict_one, samples, repetitions=1):
    """Mean seconds per image for each prediction phase and in total.

    ``predict_one(sample, timer)`` must fill ``timer`` through
    :class:`phase`. One warm-up pass is run and discarded.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one sample")
    predict_one(samples[0], {})
    totals = dict.fromkeys(PHASES, 0.0)
    total = 0.0
    for _ in range(repetitions):
        for s in samples:
            timer = {}
            t0 = time.perf_counter()
            predict_one(s, timer)
            total += time.perf_counter() - t0
            for k in PHASES:
                totals[k] += timer.get(k, 0.0)
    count = repetitions * len(samples)
    out = {k: v / count for k, v in totals.items()}
    out["total"] = total / count
    return out


__all__ = [
    "EvalRecord",
    "EvalSummary",
    "bench_predict",
    "ced",
    "ced_csv",
    "detection_ok",
    "format_pm",
    "localization_error",
    "make_record",
    "phase",
    "summarize",
    "summary_csv",
]
