"""Classification metrics: confusion matrix, macro P/R/F1, one-vs-rest ROC AUC, fold summaries."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "auc")


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Counts with true classes on rows and predicted classes on columns."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValidationError(f"label/prediction length mismatch: {y_true.shape} vs {y_pred.shape}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def binary_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Area under the ROC curve by trapezoidal integration; tied scores form one ROC step."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    pos = labels.sum()
    neg = labels.size - pos
    if pos == 0 or neg == 0:
        raise ValidationError("AUC needs both positive and negative samples")
    order = np.argsort(-scores, kind="mergesort")
    s, l = scores[order], labels[order]
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(l)[ends]
    fp = np.cumsum(~l)[ends]
    tpr = np.r_[0.0, tp / pos]
    fpr = np.r_[0.0, fp / neg]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1])) / 2.0)


def macro_auc(y_true, scores: np.ndarray) -> float:
    """Unweighted mean of one-vs-rest AUCs over classes that have both positives and negatives."""
    y_true = np.asarray(y_true)
    scores = np.asarray(scores, dtype=np.float64)
    aucs = []
    for k in range(scores.shape[1]):
        positives = y_true == k
        if positives.all() or not positives.any():
            continue
        aucs.append(binary_auc(positives, scores[:, k]))
    return float(np.mean(aucs)) if aucs else float("nan")


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float
    per_class: list[dict] = field(default_factory=list)
    confusion: list[list[int]] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)

    def as_row(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_NAMES}

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(y_true, y_pred, num_classes: int, scores: Optional[np.ndarray] = None) -> MetricsReport:
    """Accuracy and macro precision/recall/F1 (plus macro AUC when ``scores`` given).

    A class absent from ``y_true`` has undefined recall and F1; it is left
    out of the macro means with a warning.  A class that is present but
    never predicted gets precision 0.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    if y_true.size == 0:
        raise ValidationError("cannot compute metrics on an empty set")
    cm = confusion_matrix(y_true, y_pred, num_classes)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    per_class = []
    absent = []
    for k in range(num_classes):
        p = tp[k] / predicted[k] if predicted[k] else 0.0
        r = tp[k] / support[k] if support[k] else float("nan")
        if support[k] == 0:
            f = float("nan")
            absent.append(k)
        else:
            f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        per_class.append({"class": k, "precision": p, "recall": r, "f1": f, "support": int(support[k])})
    if absent:
        warnings.warn(f"classes {absent} have no samples; excluded from macro averages", RuntimeWarning, stacklevel=2)
    present = [row for row in per_class if row["support"] > 0]
    report = MetricsReport(
        accuracy=float(tp.sum() / cm.sum()),
        precision=float(np.mean([row["precision"] for row in present])),
        recall=float(np.mean([row["recall"] for row in present])),
        f1=float(np.mean([row["f1"] for row in present])),
        auc=macro_auc(y_true, scores) if scores is not None else float("nan"),
        per_class=per_class,
        confusion=cm.tolist(),
    )
    return report


@dataclass
class FoldReport:
    folds: list[MetricsReport]
    mean: dict[str, float]
    std: dict[str, float]

    def to_dict(self) -> dict:
        return {"folds": [f.to_dict() for f in self.folds], "mean": self.mean, "std": self.std}

    def table(self) -> list[dict]:
        """Per-fold rows followed by a mean +- std row."""
        rows = [{"fold": i + 1, **f.as_row()} for i, f in enumerate(self.folds)]
        rows.append({"fold": "mean±std", **{k: f"{self.mean[k]:.4f}±{self.std[k]:.4f}" for k in METRIC_NAMES}})
        return rows


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Arithmetic mean and sample (n - 1) standard deviation."""
    vals = [float(v) for v in values]
    if not vals:
        raise ValidationError("need at least one value")
    if all(v == vals[0] for v in vals):
        return vals[0], 0.0
    m = math.fsum(vals) / len(vals)
    return m, math.sqrt(math.fsum((v - m) ** 2 for v in vals) / (len(vals) - 1))


def summarize_folds(folds: Sequence[MetricsReport]) -> FoldReport:
    mean, std = {}, {}
    for k in METRIC_NAMES:
        mean[k], std[k] = mean_std([getattr(f, k) for f in folds])
    return FoldReport(list(folds), mean, std)
