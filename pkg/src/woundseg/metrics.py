"""Confusion-count based evaluation metrics for binary masks.

All five scores follow the empty-set convention: when a score's denominator
counts are all zero (e.g. sensitivity on an image with no foreground), the
score is defined as 1.0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricsReport:
    dsc: float
    jsi: float
    sensitivity: float
    specificity: float
    precision: float
    counts: ConfusionCounts

    def to_text(self) -> str:
        """Flat key=value record, one metric per line, six decimals."""
        lines = [
            f"dsc={self.dsc:.6f}",
            f"jsi={self.jsi:.6f}",
            f"sensitivity={self.sensitivity:.6f}",
            f"specificity={self.specificity:.6f}",
            f"precision={self.precision:.6f}",
            f"tp={self.counts.tp}",
            f"fp={self.counts.fp}",
            f"fn={self.counts.fn}",
            f"tn={self.counts.tn}",
        ]
        return "\n".join(lines) + "\n"


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def count_confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    """Pixel confusion counts for binary arrays of identical shape."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    for name, arr in (("pred", pred), ("gt", gt)):
        vals = np.unique(arr)
        if not np.isin(vals, (0, 1)).all():
            raise ValueError(f"{name} mask must be binary 0/1, found values {vals[:8]}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & g)),
        fp=int(np.count_nonzero(p & ~g)),
        fn=int(np.count_nonzero(~p & g)),
        tn=int(np.count_nonzero(~p & ~g)),
    )


def metrics_from_counts(c: ConfusionCounts) -> MetricsReport:
    return MetricsReport(
        dsc=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        jsi=_ratio(c.tp, c.tp + c.fp + c.fn),
        sensitivity=_ratio(c.tp, c.tp + c.fn),
        specificity=_ratio(c.tn, c.tn + c.fp),
        precision=_ratio(c.tp, c.tp + c.fp),
        counts=c,
    )


def compute_metrics(pred: np.ndarray, gt: np.ndarray) -> MetricsReport:
    """DSC, JSI, sensitivity, specificity, and precision for one
    binary prediction/ground-truth pair."""
    return metrics_from_counts(count_confusion(pred, gt))
