"""Overlap and boundary metrics for binary masks."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

THRESHOLD = 0.5


def binarize(prob) -> np.ndarray:
    """Foreground is strictly above 0.5; an exact 0.5 counts as background."""
    return np.asarray(prob) > THRESHOLD


def _pair(a, b):
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def iou(a, b) -> float:
    a, b = _pair(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def dice(a, b) -> float:
    a, b = _pair(a, b)
    total = np.count_nonzero(a) + np.count_nonzero(b)
    if total == 0:
        return 1.0
    return 2.0 * np.count_nonzero(a & b) / total


def _directed(a: np.ndarray, b: np.ndarray) -> float:
    # distance from every pixel to the nearest foreground pixel of b
    dist = ndimage.distance_transform_edt(~b)
    return float(dist[a].max())


def hausdorff(a, b) -> float:
    """Symmetric Hausdorff distance in pixels between foreground sets.

    Both empty gives 0; exactly one empty gives the image diagonal.
    """
    a, b = _pair(a, b)
    ea, eb = not a.any(), not b.any()
    if ea and eb:
        return 0.0
    if ea or eb:
        return float(np.hypot(*a.shape[-2:]))
    return max(_directed(a, b), _directed(b, a))


@dataclass
class MetricReport:
    iou: np.ndarray
    dice: np.ndarray
    hausdorff: np.ndarray

    @property
    def miou(self) -> float:
        return float(np.mean(self.iou))

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice))

    @property
    def mean_hausdorff(self) -> float:
        return float(np.mean(self.hausdorff))

    def summary(self) -> dict:
        return {"miou": self.miou, "dice": self.mean_dice, "hausdorff": self.mean_hausdorff}

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["sample", "iou", "dice", "hausdorff"])
            for i, row in enumerate(zip(self.iou, self.dice, self.hausdorff)):
                writer.writerow([i, *(repr(float(v)) for v in row)])
            writer.writerow(["mean", repr(self.miou), repr(self.mean_dice),
                             repr(self.mean_hausdorff)])


def report(pred_masks, true_masks) -> MetricReport:
    """Per-sample metrics for stacked ``[n, c, h, w]`` (or ``[n, h, w]``) masks.

    Multi-class masks are scored per channel and averaged.
    """
    pred, true = _pair(pred_masks, true_masks)
    if len(pred) == 0:
        raise ValueError("cannot score an empty dataset")
    if pred.ndim == 3:
        pred, true = pred[:, None], true[:, None]
    rows = []
    for p, t in zip(pred, true):
        per = [(iou(pc, tc), dice(pc, tc), hausdorff(pc, tc)) for pc, tc in zip(p, t)]
        rows.append(np.mean(per, axis=0))
    rows = np.array(rows)
    return MetricReport(rows[:, 0], rows[:, 1], rows[:, 2])


def evaluate(seg_params, dataset, batch_size: int = 32) -> MetricReport:
    """Threshold network predictions and score them against clean labels."""
    from .networks import seg_forward

    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = []
    for start in range(0, len(dataset), batch_size):
        idx = range(start, min(start + batch_size, len(dataset)))
        preds.append(seg_forward(dataset.images(idx), seg_params))
    prob = np.concatenate(preds)
    return report(binarize(prob), dataset.labels(clean=True) > 0.5)
