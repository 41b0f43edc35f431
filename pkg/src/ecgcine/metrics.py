"""Classification and regression metrics used in the downstream reports."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import DataError


class UndefinedMetricError(DataError):
    pass


def _as_1d(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).ravel()
    if a.size == 0:
        raise DataError(f"{name} is empty")
    return a


def metric_auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney U statistic (ties get mid-ranks)."""
    s = _as_1d(scores, "scores")
    y = _as_1d(labels, "labels")
    if s.shape != y.shape:
        raise DataError(f"scores and labels differ in length: {s.size} vs {y.size}")
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def metric_acc(pred_labels, labels) -> float:
    p = _as_1d(pred_labels, "predictions")
    y = _as_1d(labels, "labels")
    return float(np.mean(p == y))


def metric_mae(pred, target) -> float:
    return float(np.mean(np.abs(_as_1d(pred, "pred") - _as_1d(target, "target"))))


def metric_r2(pred, target) -> float:
    p = _as_1d(pred, "pred")
    y = _as_1d(target, "target")
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        raise UndefinedMetricError("R^2 is undefined for a constant target")
    return float(1.0 - np.sum((y - p) ** 2) / ss_tot)


def pearson_r(x, y) -> float:
    x = _as_1d(x, "x")
    y = _as_1d(y, "y")
    if np.std(x) == 0 or np.std(y) == 0:
        return 0.0
    return float(np.corrcoef(x, y)[0, 1])


def mean_std(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std())}


def fmt_pm(values, digits: int = 3) -> str:
    """``0.716±0.027`` style summary."""
    ms = mean_std(values)
    return f"{ms['mean']:.{digits}f}±{ms['std']:.{digits}f}"
