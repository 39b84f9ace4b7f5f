"""Confusion counting and overlap metrics for binary masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricValues:
    dsc: float
    iou: float
    precision: float
    recall: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.dsc, self.iou, self.precision, self.recall


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def threshold(confidence, tau: float = 0.5) -> np.ndarray:
    """Binary mask of values strictly greater than ``tau``."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"threshold tau must lie in [0, 1], got {tau}")
    return (_array(confidence) > tau).astype(np.uint8)


def _binary(a: np.ndarray, what: str) -> np.ndarray:
    if a.dtype == bool:
        return a
    if not np.isin(a, (0, 1)).all():
        raise ValueError(f"confusion: {what} mask has values outside {{0, 1}}")
    return a.astype(bool)


def confusion(pred_binary, gt_binary) -> ConfusionCounts:
    p = _array(pred_binary)
    g = _array(gt_binary)
    if p.shape != g.shape:
        raise ValueError(f"confusion: shape mismatch {p.shape} vs {g.shape}")
    p = _binary(p, "prediction")
    g = _binary(g, "ground-truth")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: int, den: int, perfect: bool) -> float:
    if den == 0:
        return 1.0 if perfect else 0.0
    return num / den


def metrics(c: ConfusionCounts) -> MetricValues:
    """DSC, IOU, precision and recall.

    A zero denominator yields 1.0 when there is nothing to find and nothing was
    predicted (tp = fp = fn = 0), otherwise 0.0.
    """
    perfect = c.tp == 0 and c.fp == 0 and c.fn == 0
    return MetricValues(
        dsc=_ratio(2 * c.tp, 2 * c.tp + c.fn + c.fp, perfect),
        iou=_ratio(c.tp, c.tp + c.fn + c.fp, perfect),
        precision=_ratio(c.tp, c.tp + c.fp, perfect),
        recall=_ratio(c.tp, c.tp + c.fn, perfect),
    )


def mean_metrics(values: list[MetricValues]) -> MetricValues:
    if not values:
        return MetricValues(float("nan"), float("nan"), float("nan"), float("nan"))
    arr = np.array([v.as_tuple() for v in values], dtype=np.float64)
    return MetricValues(*(float(x) for x in arr.mean(axis=0)))
