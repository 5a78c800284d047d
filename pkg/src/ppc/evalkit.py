"""Confusion-matrix segmentation metrics (per-class IoU and mIoU)."""

from __future__ import annotations

import numpy as np


class ConfusionMatrix:
    """``(C+1) x (C+1)`` pixel counts; rows are ground truth, columns prediction.

    Label 0 is background and participates in the mean like any other class.
    """

    def __init__(self, num_labels: int):
        if num_labels < 1:
            raise ValueError("need at least one label")
        self.num_labels = int(num_labels)
        self.counts = np.zeros((num_labels, num_labels), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, pred, gt, valid=None) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
        if valid is not None:
            valid = np.asarray(valid, dtype=bool)
            if valid.shape != gt.shape:
                raise ValueError("valid mask shape mismatch")
            pred = pred[valid]
            gt = gt[valid]
        pred = pred.ravel().astype(np.int64)
        gt = gt.ravel().astype(np.int64)
        n = self.num_labels
        for name, arr in (("prediction", pred), ("ground truth", gt)):
            if arr.size and (arr.min() < 0 or arr.max() >= n):
                raise ValueError(f"{name} label out of range [0, {n})")
        self.counts += np.bincount(gt * n + pred, minlength=n * n).reshape(n, n)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_labels != self.num_labels:
            raise ValueError("cannot merge matrices of different size")
        self.counts += other.counts
        return self


def accumulate(conf: ConfusionMatrix, pred, gt, valid=None) -> ConfusionMatrix:
    return conf.accumulate(pred, gt, valid)


def miou(conf: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU and their mean.

    Classes whose union is empty (absent from both prediction and ground
    truth) get ``nan`` in the per-class vector and are left out of the mean.
    """
    counts = conf.counts.astype(np.float64)
    tp = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    present = union > 0
    if not present.any():
        raise ValueError("all class unions are empty; nothing to score")
    iou = np.full(conf.num_labels, np.nan)
    iou[present] = tp[present] / union[present]
    return iou, float(iou[present].mean())
