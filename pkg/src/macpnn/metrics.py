"""Prequential Cohen's Kappa and balanced accuracy with per-concept resets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UndefinedMetricError


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def update(self, y_true: int, y_pred: int):
        if y_true:
            if y_pred:
                self.tp += 1
            else:
                self.fn += 1
        elif y_pred:
            self.fp += 1
        else:
            self.tn += 1
        return self


def _kappa(tp, fp, fn, tn):
    n = tp + fp + fn + tn
    p_o = (tp + tn) / n
    p_e = ((tp + fn) * (tp + fp) + (tn + fp) * (tn + fn)) / (n * n)
    with np.errstate(divide="ignore", invalid="ignore"):
        k = (p_o - p_e) / (1 - p_e)
    return np.where(p_e == 1, 0.0, k), p_e == 1


def cohen_kappa(c: ConfusionCounts) -> float:
    """(p_o - p_e) / (1 - p_e); defined as 0 when chance agreement is certain."""
    if c.total == 0:
        raise UndefinedMetricError("kappa of an empty confusion matrix")
    # scalar path; called once per point per ensemble member
    tp, fp, fn, tn = c.tp, c.fp, c.fn, c.tn
    n = float(c.total)
    p_o = (tp + tn) / n
    p_e = ((tp + fn) * (tp + fp) + (tn + fp) * (tn + fn)) / (n * n)
    if p_e == 1.0:
        return 0.0
    return (p_o - p_e) / (1.0 - p_e)


def balanced_accuracy(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0 or c.tn + c.fp == 0:
        raise UndefinedMetricError("balanced accuracy needs both classes in the truth")
    return 0.5 * (c.tp / (c.tp + c.fn) + c.tn / (c.tn + c.fp))


@dataclass
class ConceptCurve:
    """Metric trajectory over one concept; index i covers points 0..i of the concept."""

    start: int  # stream position of the concept's first point
    kappa: np.ndarray
    balanced_accuracy: np.ndarray  # NaN while a class is still absent
    kappa_degenerate: np.ndarray  # True where p_e == 1 forced kappa to 0


def prequential_curves(y_true, y_pred, drift_indices) -> list[ConceptCurve]:
    """Running metrics, reset at every drift index."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    bounds = [0, *sorted(int(d) for d in drift_indices), len(y_true)]
    curves = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        t, p = y_true[a:b], y_pred[a:b]
        tp = np.cumsum(t & p).astype(np.float64)
        fn = np.cumsum(t & (1 - p)).astype(np.float64)
        fp = np.cumsum((1 - t) & p).astype(np.float64)
        tn = np.cumsum((1 - t) & (1 - p)).astype(np.float64)
        kappa, degenerate = _kappa(tp, fp, fn, tn)
        with np.errstate(divide="ignore", invalid="ignore"):
            ba = 0.5 * (tp / (tp + fn) + tn / (tn + fp))
        curves.append(ConceptCurve(a, np.asarray(kappa, dtype=np.float64), ba, np.asarray(degenerate)))
    return curves


@dataclass
class DeviceSummary:
    start: list[float]  # start_j, j = 1..n_drifts
    end: list[float]
    start_truncated: list[bool] = field(default_factory=list)

    @property
    def start_avg(self) -> float:
        return float(np.mean(self.start))

    @property
    def end_avg(self) -> float:
        return float(np.mean(self.end))


@dataclass
class MetricSummary:
    metric: str
    devices: list[DeviceSummary]

    @property
    def start_avg(self) -> float:
        return float(np.mean([d.start_avg for d in self.devices]))

    @property
    def end_avg(self) -> float:
        return float(np.mean([d.end_avg for d in self.devices]))

    def start_j(self, j: int) -> float:
        """Network mean of start_j (1-based)."""
        return float(np.mean([d.start[j - 1] for d in self.devices]))

    def end_j(self, j: int) -> float:
        return float(np.mean([d.end[j - 1] for d in self.devices]))


def device_summary(curves: list[ConceptCurve], start_points: int, metric: str = "kappa") -> DeviceSummary:
    """start_j / end_j over every concept after the first.

    ``start_points`` is the number of points after a drift at which start_j is
    read (numBatches * batch size); shorter concepts use their final value.
    """
    if len(curves) < 2:
        raise ValueError("need at least one drift (two concepts)")
    start, end, trunc = [], [], []
    for c in curves[1:]:
        values = c.kappa if metric == "kappa" else c.balanced_accuracy
        short = len(values) < start_points
        start.append(float(values[-1] if short else values[start_points - 1]))
        end.append(float(values[-1]))
        trunc.append(short)
    return DeviceSummary(start, end, trunc)


def start_end_summary(device_curves: list[list[ConceptCurve]], start_points: int,
                      metric: str = "kappa") -> MetricSummary:
    return MetricSummary(metric, [device_summary(c, start_points, metric) for c in device_curves])
