"""Confusion counts, per-class IoU, mIoU and geometric IoU over OccGrids."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .head import OccGrid


@dataclass
class ConfusionStats:
    tp: np.ndarray  # (Cls + 1,) indexed by class id, entry 0 is the empty class
    fp: np.ndarray
    fn: np.ndarray
    geo_tp: int
    geo_fp: int
    geo_fn: int

    @property
    def num_classes(self) -> int:
        return len(self.tp) - 1

    def __add__(self, other: "ConfusionStats") -> "ConfusionStats":
        if self.num_classes != other.num_classes:
            raise ValueError("cannot add confusion stats with different class counts")
        return ConfusionStats(
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.geo_tp + other.geo_tp,
            self.geo_fp + other.geo_fp,
            self.geo_fn + other.geo_fn,
        )


def confusion(pred: OccGrid, gt: OccGrid) -> ConfusionStats:
    if pred.shape != gt.shape:
        raise ValueError(f"confusion: prediction shape {pred.shape} != ground truth {gt.shape}")
    if pred.num_classes != gt.num_classes:
        raise ValueError(f"confusion: class counts differ ({pred.num_classes} vs {gt.num_classes})")
    n = gt.num_classes + 1
    p = pred.labels.reshape(-1).astype(np.int64)
    g = gt.labels.reshape(-1).astype(np.int64)
    mat = np.bincount(g * n + p, minlength=n * n).reshape(n, n)  # rows gt, cols pred
    tp = np.diag(mat).copy()
    fp = mat.sum(axis=0) - tp
    fn = mat.sum(axis=1) - tp
    po, go = p > 0, g > 0
    return ConfusionStats(
        tp, fp, fn, int((po & go).sum()), int((po & ~go).sum()), int((~po & go).sum())
    )


def iou_from_counts(tp: int, fp: int, fn: int) -> float:
    den = tp + fp + fn
    return float(tp / den) if den > 0 else 0.0


def iou(stats: ConfusionStats, c: int) -> float:
    return iou_from_counts(int(stats.tp[c]), int(stats.fp[c]), int(stats.fn[c]))


def geometric_iou(stats: ConfusionStats) -> float:
    return iou_from_counts(stats.geo_tp, stats.geo_fp, stats.geo_fn)


def miou(stats: ConfusionStats, present_only: bool = False) -> float:
    """Unweighted mean IoU over classes 1..Cls; absent classes score 0.

    With ``present_only`` the mean runs over classes that occur in the ground
    truth or the prediction.
    """
    classes = range(1, stats.num_classes + 1)
    if present_only:
        classes = [c for c in classes if stats.tp[c] + stats.fp[c] + stats.fn[c] > 0]
        if not classes:
            return 0.0
    vals = [iou(stats, c) for c in classes]
    return float(np.mean(vals)) if vals else 0.0


def metrics_report(stats: ConfusionStats, class_names: Sequence[str] | None = None) -> dict:
    if class_names is None:
        class_names = [f"class_{c}" for c in range(1, stats.num_classes + 1)]
    if len(class_names) != stats.num_classes:
        raise ValueError(f"expected {stats.num_classes} class names, got {len(class_names)}")
    return {
        "iou_geometric": geometric_iou(stats),
        "miou": miou(stats),
        "miou_present": miou(stats, present_only=True),
        "per_class": {name: iou(stats, c) for c, name in enumerate(class_names, start=1)},
    }


def metrics_json(stats: ConfusionStats, class_names: Sequence[str] | None = None) -> str:
    return json.dumps(metrics_report(stats, class_names), sort_keys=False)
