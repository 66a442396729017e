"""Statistical evaluation: regression errors, out-of-sample R2, and
three-class classification metrics.

Undefined precision/recall (a class missing from predictions or truth) is
reported as 0.0 and the class is flagged, never NaN.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

N_CLASSES = 3


def _check_lengths(pred: np.ndarray, truth: np.ndarray) -> None:
    if pred.shape != truth.shape:
        raise DataError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise DataError("empty input")


def mse(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    _check_lengths(pred, truth)
    return float(np.mean((truth - pred) ** 2))


def mae(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    _check_lengths(pred, truth)
    return float(np.mean(np.abs(truth - pred)))


def r2_oos(pred: np.ndarray, truth: np.ndarray) -> float:
    """1 - SSE / SST against the truth's own mean on held-out data."""
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    _check_lengths(pred, truth)
    sst = float(np.sum((truth - truth.mean()) ** 2))
    if sst == 0.0:
        raise DataError("r2 undefined: truth has zero variance")
    sse = float(np.sum((truth - pred) ** 2))
    return 1.0 - sse / sst


@dataclass
class ClassificationReport:
    accuracy: float
    precision: np.ndarray          # per class
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray          # rows = truth, cols = prediction
    support: np.ndarray
    degenerate_classes: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "confusion": self.confusion.tolist(),
            "support": self.support.tolist(),
            "degenerate_classes": self.degenerate_classes,
        }


def classification_report(preds: np.ndarray, labels: np.ndarray) -> ClassificationReport:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise DataError(f"shape mismatch: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise DataError("empty input")
    if labels.min() < 0 or labels.max() >= N_CLASSES or preds.min() < 0 or preds.max() >= N_CLASSES:
        raise DataError(f"labels must be in [0, {N_CLASSES})")
    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    support = confusion.sum(axis=1)
    predicted = confusion.sum(axis=0)
    tp = np.diag(confusion).astype(float)
    precision = np.zeros(N_CLASSES)
    recall = np.zeros(N_CLASSES)
    degenerate = []
    for c in range(N_CLASSES):
        if predicted[c] > 0:
            precision[c] = tp[c] / predicted[c]
        if support[c] > 0:
            recall[c] = tp[c] / support[c]
        if predicted[c] == 0 or support[c] == 0:
            degenerate.append(c)
    denom = precision + recall
    f1 = np.where(denom > 0, 2.0 * precision * recall / np.where(denom > 0, denom, 1.0), 0.0)
    return ClassificationReport(
        accuracy=float(tp.sum() / len(labels)),
        precision=precision,
        recall=recall,
        f1=f1,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        confusion=confusion,
        support=support,
        degenerate_classes=degenerate,
    )
