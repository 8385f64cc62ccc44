"""Confusion-matrix evaluation metrics.

Conventions: rows are true classes, columns predictions.  A class with
neither true nor predicted instances contributes 0 to the UA and
macro-F1 means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyDataset


@dataclass
class EvalMetrics:
    confusion: np.ndarray
    weighted_accuracy: float
    unweighted_accuracy: float
    macro_f1: float


def confusion_matrix(y_true, y_pred, num_classes) -> np.ndarray:
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        m[t, p] += 1
    return m


def metrics_from_confusion(m: np.ndarray) -> EvalMetrics:
    m = np.asarray(m, dtype=np.int64)
    total = m.sum()
    if total == 0:
        raise EmptyDataset("empty confusion matrix")
    c = m.shape[0]
    diag = np.diag(m).astype(np.float64)
    row = m.sum(axis=1).astype(np.float64)
    col = m.sum(axis=0).astype(np.float64)
    recall = np.divide(diag, row, out=np.zeros(c), where=row > 0)
    f1 = np.zeros(c)
    denom = row + col  # 2 TP + FN + FP
    np.divide(2.0 * diag, denom, out=f1, where=denom > 0)
    return EvalMetrics(
        confusion=m,
        weighted_accuracy=float(diag.sum() / total),
        unweighted_accuracy=float(recall.mean()),
        macro_f1=float(f1.mean()),
    )


def evaluate_predictions(y_true, y_pred, num_classes) -> EvalMetrics:
    if len(y_true) == 0:
        raise EmptyDataset("no utterances to evaluate")
    return metrics_from_confusion(confusion_matrix(y_true, y_pred, num_classes))
