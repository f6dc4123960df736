"""Confusion-matrix metrics with support-weighted averages."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MetricsReport:
    confusion: np.ndarray  # K x K, rows = true class, columns = predicted
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float

    def to_json(self, class_names=None) -> dict:
        k = len(self.support)
        names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
        r6 = lambda v: float(f"{v:.6g}")  # noqa: E731
        return {
            "accuracy": r6(self.accuracy),
            "weighted_precision": r6(self.weighted_precision),
            "weighted_recall": r6(self.weighted_recall),
            "weighted_f1": r6(self.weighted_f1),
            "confusion": self.confusion.tolist(),
            "per_class": {
                names[i]: {"precision": r6(self.precision[i]), "recall": r6(self.recall[i]),
                           "f1": r6(self.f1[i]), "support": int(self.support[i])}
                for i in range(k)
            },
        }


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(len(num), dtype=np.float64)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


def weighted_metrics(y_true, y_pred, num_classes: int) -> MetricsReport:
    """Per-class precision/recall/F1 (0 on empty denominators) and support-weighted means."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise ValueError("weighted_metrics: empty input")
    if y_true.shape != y_pred.shape:
        raise ValueError("weighted_metrics: y_true and y_pred differ in length")
    for arr in (y_true, y_pred):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"labels must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    precision = _safe_ratio(tp, cm.sum(axis=0).astype(np.float64))
    recall = _safe_ratio(tp, support.astype(np.float64))
    f1 = _safe_ratio(2 * precision * recall, precision + recall)
    w = support / support.sum()
    return MetricsReport(cm, precision, recall, f1, support,
                         float(tp.sum() / support.sum()),
                         float(w @ precision), float(w @ recall), float(w @ f1))
