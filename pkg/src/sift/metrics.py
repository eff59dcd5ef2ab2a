"""Imbalance-aware classification metrics.

Abnormal is the positive class throughout: sensitivity is abnormal recall,
specificity is normal recall, and a sample is predicted abnormal iff its
score is ``>= threshold``. Accuracy is intentionally not reported.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.stats import rankdata


class Counts(NamedTuple):
    tp: int
    fp: int
    tn: int
    fn: int


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    if s.size == 0:
        raise ValueError("empty input")
    return s, y


def _require_both(y: np.ndarray) -> None:
    if y.all() or not y.any():
        raise ValueError("both normal and abnormal samples are required")


def auc(scores, labels) -> float:
    """Mann-Whitney AUC via average ranks (ties count 1/2)."""
    s, y = _validate(scores, labels)
    _require_both(y)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion_at(scores, labels, threshold: float) -> Counts:
    s, y = _validate(scores, labels)
    pred = s >= threshold
    return Counts(
        tp=int((pred & y).sum()),
        fp=int((pred & ~y).sum()),
        tn=int((~pred & ~y).sum()),
        fn=int((~pred & y).sum()),
    )


def npv(counts: Counts) -> float:
    """TN / (TN + FN); NaN (with a warning) when nothing is predicted normal."""
    denom = counts.tn + counts.fn
    if denom == 0:
        warnings.warn("NPV undefined: no negative predictions", RuntimeWarning)
        return float("nan")
    return counts.tn / denom


def recall_per_class(counts: Counts) -> tuple[float, float]:
    """``(normal_recall, abnormal_recall)``."""
    if counts.tn + counts.fp == 0 or counts.tp + counts.fn == 0:
        raise ValueError("recall needs at least one sample of each class")
    return counts.tn / (counts.tn + counts.fp), counts.tp / (counts.tp + counts.fn)


def _sweep(s: np.ndarray, y: np.ndarray):
    """Distinct scores descending with cumulative TP/FP at threshold = that score."""
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), s_sorted.size - 1]
    tps = np.cumsum(y_sorted)[last]
    fps = np.cumsum(~y_sorted)[last]
    return s_sorted[last], tps, fps


def roc_curve(scores, labels, drop_intermediate: bool = True) -> list[tuple[float, float, float]]:
    """ROC points ``(fpr, tpr, threshold)`` from (0, 0) to (1, 1).

    The first point has threshold ``inf``; every other point uses a distinct
    score as threshold. With ``drop_intermediate`` collinear interior points
    are removed, which leaves the curve (and its area) unchanged.
    """
    s, y = _validate(scores, labels)
    _require_both(y)
    thr, tps, fps = _sweep(s, y)
    tpr = np.r_[0.0, tps / y.sum()]
    fpr = np.r_[0.0, fps / (~y).sum()]
    thr = np.r_[np.inf, thr]
    keep = np.ones(tpr.size, dtype=bool)
    if drop_intermediate and tpr.size > 2:
        # exact collinearity test on integer counts
        tp_i, fp_i = np.r_[0, tps], np.r_[0, fps]
        cross = (tp_i[1:-1] - tp_i[:-2]) * (fp_i[2:] - fp_i[1:-1]) - (tp_i[2:] - tp_i[1:-1]) * (
            fp_i[1:-1] - fp_i[:-2]
        )
        keep[1:-1] = cross != 0
    return [(float(f), float(t), float(h)) for f, t, h in zip(fpr[keep], tpr[keep], thr[keep])]


def trapezoid_auc(curve: Sequence[tuple[float, float, float]]) -> float:
    fpr = np.array([p[0] for p in curve])
    tpr = np.array([p[1] for p in curve])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def specificity_at_sensitivity(scores, labels, level: float) -> float:
    """Highest specificity over thresholds whose sensitivity is ``>= level``."""
    if not 0.0 < level <= 1.0:
        raise ValueError("level must lie in (0, 1]")
    s, y = _validate(scores, labels)
    _require_both(y)
    _, tps, fps = _sweep(s, y)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    sens = tps / n_pos
    spec = (n_neg - fps) / n_neg
    ok = sens >= level
    # the lowest threshold always reaches sensitivity 1
    return float(spec[ok].max())


def select_threshold(scores, labels) -> float:
    """Threshold minimizing ``|normal_recall - abnormal_recall|``.

    Candidates are midpoints between consecutive distinct scores plus one
    value just below the minimum and one just above the maximum. Ties go to
    the higher normal recall, then to the lower threshold.
    """
    s, y = _validate(scores, labels)
    _require_both(y)
    uniq = np.unique(s)
    cands = np.r_[np.nextafter(uniq[0], -np.inf), (uniq[:-1] + uniq[1:]) / 2.0, np.nextafter(uniq[-1], np.inf)]
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    # predicted abnormal iff score >= t: count via sorted search
    pos_sorted, neg_sorted = np.sort(s[y]), np.sort(s[~y])
    tp = n_pos - np.searchsorted(pos_sorted, cands, side="left")
    fp = n_neg - np.searchsorted(neg_sorted, cands, side="left")
    ar = tp / n_pos
    nr = (n_neg - fp) / n_neg
    gap = np.abs(nr - ar)
    # lexsort: last key is primary
    best = np.lexsort((cands, -nr, gap))[0]
    return float(cands[best])


@dataclass
class MetricReport:
    auc: float
    npv: float
    normal_recall: float
    abnormal_recall: float
    spec_at_87: float
    spec_at_80: float
    threshold_used: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def counts(self) -> Counts:
        return Counts(self.tp, self.fp, self.tn, self.fn)

    def to_dict(self) -> dict:
        out = asdict(self)
        rates = ("auc", "npv", "normal_recall", "abnormal_recall", "spec_at_87", "spec_at_80")
        out["percent"] = {
            k: (None if math.isnan(out[k]) else round(100.0 * out[k], 4)) for k in rates
        }
        if math.isnan(out["npv"]):
            out["npv"] = None
        return out


def metric_report(scores, labels, threshold: Optional[float] = None) -> MetricReport:
    """All reported metrics; the threshold defaults to :func:`select_threshold` on the same data."""
    if threshold is None:
        threshold = select_threshold(scores, labels)
    counts = confusion_at(scores, labels, threshold)
    nr, ar = recall_per_class(counts)
    return MetricReport(
        auc=auc(scores, labels),
        npv=npv(counts),
        normal_recall=nr,
        abnormal_recall=ar,
        spec_at_87=specificity_at_sensitivity(scores, labels, 0.87),
        spec_at_80=specificity_at_sensitivity(scores, labels, 0.80),
        threshold_used=float(threshold),
        **counts._asdict(),
    )


def write_roc_csv(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fpr", "tpr", "threshold"])
        for fpr, tpr, thr in curve:
            writer.writerow([repr(fpr), repr(tpr), repr(thr)])


def read_roc_csv(path) -> list[tuple[float, float, float]]:
    with open(path, newline="") as fh:
        return [(float(r["fpr"]), float(r["tpr"]), float(r["threshold"])) for r in csv.DictReader(fh)]
