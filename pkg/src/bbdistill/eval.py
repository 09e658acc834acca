"""Confusion matrices, per-class IoU / mIoU, and pseudo-label diagnostics."""
import csv
import io
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # C x C, rows ground truth, columns prediction

    @classmethod
    def zeros(cls, num_classes):
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts)


def accumulate(cm, predictions, labels):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError("prediction and label grids differ in shape")
    C = cm.num_classes
    for name, grid in (("prediction", predictions), ("label", labels)):
        if grid.size and (grid.min() < 0 or grid.max() >= C):
            raise ValueError(f"{name} class out of range [0, {C})")
    flat = labels.ravel().astype(np.int64) * C + predictions.ravel().astype(np.int64)
    return ConfusionMatrix(cm.counts + np.bincount(flat, minlength=C * C).reshape(C, C))


@dataclass(frozen=True)
class MetricsReport:
    per_class_iou: np.ndarray  # nan marks classes with an empty union
    miou: float
    pixel_accuracy: float
    retained_fraction: float = float("nan")

    @property
    def defined(self):
        return ~np.isnan(self.per_class_iou)


def iou_from_cm(cm, retained_fraction=float("nan")):
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    defined = ~np.isnan(iou)
    miou = float(iou[defined].mean()) if defined.any() else float("nan")
    total = counts.sum()
    acc = float(tp.sum() / total) if total else float("nan")
    return MetricsReport(iou, miou, acc, retained_fraction)


def mask_diagnostics(mask, teacher_argmax, labels):
    """(retained_fraction, retained_accuracy, overall_accuracy); nan accuracy when nothing is retained."""
    teacher_argmax = np.asarray(teacher_argmax)
    labels = np.asarray(labels)
    if not (mask.shape == teacher_argmax.shape == labels.shape):
        raise ValueError("mask, teacher argmax and labels differ in shape")
    kept = mask.weights > 0
    correct = teacher_argmax == labels
    retained_fraction = float(kept.mean())
    retained_accuracy = float(correct[kept].mean()) if kept.any() else float("nan")
    return retained_fraction, retained_accuracy, float(correct.mean())


# --- CSV output ---------------------------------------------------------------


def csv_header(num_classes):
    return ["step", "variant", "miou", "pixel_accuracy", "retained_fraction"] + [
        f"iou_{c}" for c in range(num_classes)
    ]


def _fmt(x):
    return "nan" if np.isnan(x) else f"{x:.6f}"


def csv_row(step, variant, report):
    return [str(step), variant, _fmt(report.miou), _fmt(report.pixel_accuracy),
            _fmt(report.retained_fraction)] + [_fmt(x) for x in report.per_class_iou]


def metrics_csv(rows, num_classes):
    """Render (step, variant, MetricsReport) rows, header first, with "\\n" line endings."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header(num_classes))
    for step, variant, report in rows:
        w.writerow(csv_row(step, variant, report))
    return buf.getvalue()
