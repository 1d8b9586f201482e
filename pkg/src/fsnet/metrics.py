"""Confusion-matrix metrics and exact ROC AUC for binary pixel masks.

Evaluation is restricted to the field-of-view mask when one is present.
Zero-denominator metrics return 0.0 and set ``zero_division`` on the
report instead of producing NaN, so CSV pipelines stay total.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other):
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )


@dataclass
class MetricsReport:
    sensitivity: float
    specificity: float
    f1: float
    accuracy: float
    auc: float
    iou: float
    threshold_used: float
    pixels_evaluated: int
    zero_division: bool = False

    def csv_row(self):
        return (
            f"{self.sensitivity:.6f},{self.specificity:.6f},{self.f1:.6f},"
            f"{self.accuracy:.6f},{self.auc:.6f},{self.iou:.6f},"
            f"{self.threshold_used:.6f},{self.pixels_evaluated}"
        )


CSV_HEADER = "sen,spe,f1,acc,auc,iou,threshold,pixels"


def _flatten_masked(arr, fov):
    arr = np.asarray(arr)
    if fov is None:
        return arr.ravel()
    fov = np.asarray(fov) > 0
    if fov.shape != arr.shape:
        raise ValueError(f"fov shape {fov.shape} != array shape {arr.shape}")
    return arr[fov]


def confusion(pred, truth, fov=None) -> ConfusionCounts:
    """Pixel confusion counts, optionally restricted to a field of view."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"pred shape {pred.shape} != truth shape {truth.shape}")
    p = _flatten_masked(pred, fov) > 0
    t = _flatten_masked(truth, fov) > 0
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    tn = int(np.count_nonzero(~p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, tn, fn)


def _safe_div(num, den):
    if den == 0:
        return 0.0, True
    return num / den, False


def scalar_metrics(c: ConfusionCounts, threshold=0.5) -> MetricsReport:
    """Sen, Spe, F1, Acc, IoU from counts; AUC is left 0 for callers to fill.

    Sen = tp/(tp+fn), Spe = tn/(tn+fp), Acc = (tp+tn)/total,
    F1 = 2tp/(2tp+fp+fn), IoU = tp/(tp+fp+fn); note iou = f1/(2-f1).
    """
    if c.total == 0:
        raise ValueError("scalar_metrics: empty confusion counts")
    sen, z1 = _safe_div(c.tp, c.tp + c.fn)
    spe, z2 = _safe_div(c.tn, c.tn + c.fp)
    f1, z3 = _safe_div(2 * c.tp, 2 * c.tp + c.fp + c.fn)
    acc, _ = _safe_div(c.tp + c.tn, c.total)
    iou, z4 = _safe_div(c.tp, c.tp + c.fp + c.fn)
    return MetricsReport(
        sensitivity=sen,
        specificity=spe,
        f1=f1,
        accuracy=acc,
        auc=0.0,
        iou=iou,
        threshold_used=threshold,
        pixels_evaluated=c.total,
        zero_division=z1 or z2 or z3 or z4,
    )


def auc(probs, truth, fov=None) -> float:
    """Exact area under the ROC curve, every distinct value a threshold.

    Trapezoidal integration with tie groups handled jointly, which makes
    it identical to the Mann-Whitney statistic with ties counted half.
    Raises when only one class is present inside the field of view.
    """
    values = getattr(probs, "values", probs)
    p = np.asarray(_flatten_masked(values, fov), dtype=np.float64)
    t = np.asarray(_flatten_masked(truth, fov)) > 0
    if p.shape != t.shape:
        raise ValueError(f"probs shape {p.shape} != truth shape {t.shape}")
    n_pos = int(np.count_nonzero(t))
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc: both classes must be present")
    order = np.argsort(-p, kind="stable")
    sorted_p = p[order]
    sorted_t = t[order]
    area = 0.0
    tp_prev = 0.0
    fp_prev = 0.0
    i = 0
    n = p.size
    while i < n:
        j = i
        while j < n and sorted_p[j] == sorted_p[i]:
            j += 1
        tp_cur = tp_prev + np.count_nonzero(sorted_t[i:j])
        fp_cur = fp_prev + (j - i) - np.count_nonzero(sorted_t[i:j])
        area += (fp_cur - fp_prev) * (tp_cur + tp_prev) / 2.0
        tp_prev, fp_prev = tp_cur, fp_cur
        i = j
    return area / (n_pos * n_neg)


def aggregate(counts_list, reports, mode, pooled_auc=None) -> MetricsReport:
    """Combine per-image results over a test set.

    "pooled" sums the confusion counts and recomputes the scalar metrics
    (AUC from ``pooled_auc`` when given, else the mean of per-image
    AUCs); "averaged" takes the plain mean of every per-image metric.
    """
    if not reports:
        raise ValueError("aggregate: no reports")
    if mode == "pooled":
        total = counts_list[0]
        for c in counts_list[1:]:
            total = total + c
        out = scalar_metrics(total, threshold=float(np.mean([r.threshold_used for r in reports])))
        auc_value = pooled_auc if pooled_auc is not None else float(
            np.mean([r.auc for r in reports])
        )
        return replace(out, auc=auc_value)
    if mode == "averaged":
        return MetricsReport(
            sensitivity=float(np.mean([r.sensitivity for r in reports])),
            specificity=float(np.mean([r.specificity for r in reports])),
            f1=float(np.mean([r.f1 for r in reports])),
            accuracy=float(np.mean([r.accuracy for r in reports])),
            auc=float(np.mean([r.auc for r in reports])),
            iou=float(np.mean([r.iou for r in reports])),
            threshold_used=float(np.mean([r.threshold_used for r in reports])),
            pixels_evaluated=int(sum(r.pixels_evaluated for r in reports)),
            zero_division=any(r.zero_division for r in reports),
        )
    raise ValueError(f"unknown aggregation mode {mode!r}")
