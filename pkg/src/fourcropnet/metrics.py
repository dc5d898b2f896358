"""Confusion matrix, one-vs-rest classification metrics and ROC/AUC."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


class MetricWarning(UserWarning):
    pass


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ConfigError("y_true and y_pred must have the same length")
    for arr in (y_true, y_pred):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ConfigError(f"labels must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _ratio(num, den, what, k, flagged):
    if den == 0:
        flagged.append(f"class {k}: {what} undefined (zero denominator); reported as 0")
        return 0.0
    return float(num / den)


def metrics_from_confusion(confusion, exclude_empty: bool = False) -> dict:
    """One-vs-rest accuracy, sensitivity, specificity, precision and F1 per class, plus macro means.

    Zero denominators yield 0 and a :class:`MetricWarning`.  With
    ``exclude_empty`` set, classes without true samples are left out of the
    macro averages.
    """
    cm = np.asarray(confusion, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] == 0:
        raise ConfigError("confusion matrix must be square and non-empty")
    total = int(cm.sum())
    if total == 0:
        raise ConfigError("confusion matrix is empty (zero samples)")
    flagged: list[str] = []
    per_class = []
    for k in range(cm.shape[0]):
        tp = int(cm[k, k])
        fn = int(cm[k].sum()) - tp
        fp = int(cm[:, k].sum()) - tp
        tn = total - tp - fn - fp
        sens = _ratio(tp, tp + fn, "sensitivity", k, flagged)
        spec = _ratio(tn, tn + fp, "specificity", k, flagged)
        prec = _ratio(tp, tp + fp, "precision", k, flagged)
        f1 = 2 * prec * sens / (prec + sens) if prec + sens > 0 else 0.0
        per_class.append({
            "support": tp + fn,
            "accuracy": (tp + tn) / total,
            "sensitivity": sens,
            "specificity": spec,
            "precision": prec,
            "f1": f1,
        })
    for msg in flagged:
        warnings.warn(msg, MetricWarning, stacklevel=2)
    included = [m for m in per_class if m["support"] > 0 or not exclude_empty]
    macro = {key: float(np.mean([m[key] for m in included]))
             for key in ("accuracy", "sensitivity", "specificity", "precision", "f1")}
    return {
        "accuracy": float(np.trace(cm) / total),
        "total": total,
        "per_class": per_class,
        "macro": macro,
        "warnings": flagged,
    }


@dataclass
class RocResult:
    curves: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    auc: dict[int, float] = field(default_factory=dict)
    skipped: list[int] = field(default_factory=list)

    @property
    def macro_auc(self) -> float:
        return float(np.mean(list(self.auc.values()))) if self.auc else float("nan")


def binary_roc(scores, positive) -> tuple[np.ndarray, np.ndarray, float]:
    """ROC points from a threshold sweep over distinct scores, and the trapezoidal AUC.

    The area is accumulated in integer counts and divided once, so it equals
    the pairwise (Mann-Whitney) estimate bit for bit.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], positive[order]
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.r_[0, np.cumsum(y)[ends]]
    fp = np.r_[0, np.cumsum(~y)[ends]]
    twice_area = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    auc = twice_area / (2 * n_pos * n_neg)
    return fp / n_neg, tp / n_pos, auc


def pairwise_auc(scores, positive) -> float:
    """AUC by counting every positive/negative pair: (ordered + ties / 2) / (P * N)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    pos, neg = scores[positive], scores[~positive]
    greater = int((pos[:, None] > neg[None, :]).sum())
    ties = int((pos[:, None] == neg[None, :]).sum())
    return (2 * greater + ties) / (2 * len(pos) * len(neg))


def roc_curve(scores, labels) -> RocResult:
    """One-vs-rest ROC for every class column of an (N, C) score matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or len(scores) != len(labels) or len(labels) == 0:
        raise ConfigError("scores must be (N, C) with N matching labels and N >= 1")
    result = RocResult()
    for k in range(scores.shape[1]):
        positive = labels == k
        if positive.all() or not positive.any():
            warnings.warn(f"class {k}: ROC needs positives and negatives; skipped", MetricWarning, stacklevel=2)
            result.skipped.append(k)
            continue
        fpr, tpr, auc = binary_roc(scores[:, k], positive)
        result.curves[k] = (fpr, tpr)
        result.auc[k] = auc
    return result
