"""Confusion matrices and per-class IoU / accuracy / F1 reports."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class ConfusionMatrix:
    """``counts[t, p]`` = points of true class t predicted as p."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValidationError(f"confusion matrix must be square, got {c.shape}")
        if (c < 0).any():
            raise ValidationError("confusion matrix has negative counts")
        object.__setattr__(self, "counts", c)

    @classmethod
    def empty(cls, num_classes: int) -> ConfusionMatrix:
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp(self):
        return np.diag(self.counts)

    def fp(self):
        return self.counts.sum(axis=0) - self.tp()

    def fn(self):
        return self.counts.sum(axis=1) - self.tp()

    def tn(self):
        return self.total - self.tp() - self.fp() - self.fn()

    def merge(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if other.num_classes != self.num_classes:
            raise ValidationError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, true_labels, pred_labels) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64).ravel()
    p = np.asarray(pred_labels, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise ValidationError(f"length mismatch: {t.size} true labels vs {p.size} predictions")
    k = cm.num_classes
    for name, arr in (("true", t), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValidationError(f"{name} label out of range [0, {k})")
    add = np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(cm.counts + add)


def confusion_matrix(true_labels, pred_labels, num_classes: int) -> ConfusionMatrix:
    return accumulate(ConfusionMatrix.empty(num_classes), true_labels, pred_labels)


def _ratio(num, den):
    return [None if d == 0 else float(n) / float(d) for n, d in zip(num, den)]


@dataclass
class MetricsReport:
    """Per-class metrics; ``None`` marks an undefined (0/0) value."""

    class_names: list[str]
    iou: list[float | None]
    accuracy: list[float | None]
    precision: list[float | None]
    recall: list[float | None]
    f1: list[float | None]
    overall_accuracy: float
    mean_iou: float | None
    mean_f1: float | None
    support: list[int]

    def to_json(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "mean_iou": self.mean_iou,
            "mean_f1": self.mean_f1,
            "classes": {
                name: {
                    "acc": self.accuracy[i],
                    "iou": self.iou[i],
                    "f1": self.f1[i],
                    "precision": self.precision[i],
                    "recall": self.recall[i],
                    "support": self.support[i],
                }
                for i, name in enumerate(self.class_names)
            },
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=False) + "\n"

    def to_text(self) -> str:
        """Aligned Acc / IoU / F1 table, one column group per class."""

        def fmt(v):
            return "   -" if v is None else f"{v:4.2f}"

        width = max(16, max(len(n) for n in self.class_names) + 2)
        head1 = "".join(f"{n:^{width}}" for n in self.class_names)
        head2 = "".join(f"{'Acc  IoU  F1':^{width}}" for _ in self.class_names)
        vals = "".join(
            f"{fmt(a) + ' ' + fmt(i) + ' ' + fmt(f):^{width}}"
            for a, i, f in zip(self.accuracy, self.iou, self.f1)
        )
        tail = f"overall acc {self.overall_accuracy:.4f}  mIoU {fmt(self.mean_iou)}  mF1 {fmt(self.mean_f1)}"
        return "\n".join([head1, head2, vals, tail]) + "\n"


def compute_report(cm: ConfusionMatrix, class_names=None) -> MetricsReport:
    total = cm.total
    if total == 0:
        raise ValidationError("cannot report on an empty confusion matrix")
    k = cm.num_classes
    names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
    if len(names) != k:
        raise ValidationError(f"{len(names)} class names for a {k}-class matrix")
    tp, fp, fn, tn = cm.tp(), cm.fp(), cm.fn(), cm.tn()
    seen = (tp + fp + fn) > 0
    iou = _ratio(tp, tp + fp + fn)
    # 2TP / (2TP + FP + FN) equals 2PR / (P + R) wherever both are defined
    f1 = _ratio(2 * tp, 2 * tp + fp + fn)
    acc = [v if s else None for v, s in zip(_ratio(tp + tn, tp + fp + tn + fn), seen)]
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    defined_iou = [v for v in iou if v is not None]
    defined_f1 = [v for v in f1 if v is not None]
    return MetricsReport(
        names,
        iou,
        acc,
        precision,
        recall,
        f1,
        float(np.trace(cm.counts)) / total,
        float(np.mean(defined_iou)) if defined_iou else None,
        float(np.mean(defined_f1)) if defined_f1 else None,
        [int(s) for s in cm.counts.sum(axis=1)],
    )


def f1_from_iou(iou: float) -> float:
    return 2.0 * iou / (1.0 + iou)
