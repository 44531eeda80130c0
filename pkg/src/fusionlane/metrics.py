"""Confusion-matrix accumulation and segmentation quality measures."""

from __future__ import annotations

import csv

import numpy as np

__all__ = ["NUM_CLASSES", "CLASS_NAMES", "ConfusionMatrix", "write_report_csv"]

NUM_CLASSES = 7
CLASS_NAMES = (
    "Background",
    "Solid Line",
    "Dotted Line",
    "Stop Line",
    "Arrow",
    "Prohibited Area",
    "Other Point",
)


class ConfusionMatrix:
    """counts[i, j] = pixels of ground-truth class i predicted as class j."""

    def __init__(self, num_classes: int = NUM_CLASSES):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
        p = pred.reshape(-1).astype(np.int64)
        g = gt.reshape(-1).astype(np.int64)
        k = self.num_classes
        for name, a in (("prediction", p), ("ground truth", g)):
            if a.size and (a.min() < 0 or a.max() >= k):
                raise ValueError(f"{name} contains labels outside [0, {k})")
        self.counts += np.bincount(k * g + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def pixel_accuracy(self) -> float:
        if self.total == 0:
            raise ValueError("pixel_accuracy of an empty confusion matrix")
        return float(np.trace(self.counts) / self.total)

    def iou_per_class(self) -> np.ndarray:
        """IOU per class; classes absent from both gt and prediction are NaN."""
        diag = np.diag(self.counts).astype(np.float64)
        denom = self.counts.sum(axis=1) + self.counts.sum(axis=0) - np.diag(self.counts)
        with np.errstate(invalid="ignore", divide="ignore"):
            iou = np.where(denom > 0, diag / denom, np.nan)
        return iou

    def miou(self) -> float:
        """Mean IOU over classes with a defined (nonzero-denominator) IOU."""
        if self.total == 0:
            raise ValueError("miou of an empty confusion matrix")
        iou = self.iou_per_class()
        return float(np.nanmean(iou))


def write_report_csv(cm: ConfusionMatrix, path) -> None:
    """One row per class (name, IOU), then MIOU and pixel accuracy rows."""
    iou = cm.iou_per_class()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "iou"])
        for i in range(cm.num_classes):
            name = CLASS_NAMES[i] if i < len(CLASS_NAMES) else f"class_{i}"
            writer.writerow([name, "" if np.isnan(iou[i]) else f"{iou[i]:.6f}"])
        writer.writerow(["MIOU", f"{cm.miou():.6f}"])
        writer.writerow(["PixelAccuracy", f"{cm.pixel_accuracy():.6f}"])
