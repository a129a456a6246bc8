"""Label-quality metrics: confusion counts, per-class IoU, mIoU, pixel accuracy.

Pixels whose reference label is background are ignored. A predicted
background pixel on a labelled reference pixel is a miss for that class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from hsirefine.cube import LabelMap

__all__ = [
    "EvalReport",
    "confusion_counts",
    "iou_from_counts",
    "evaluate",
    "separability",
    "format_table",
]


def confusion_counts(pred: np.ndarray, ref: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """``(confusion, missed)``: ``confusion[p-1, r-1]`` counts predicted p on reference r,
    ``missed[r-1]`` counts predicted background on reference r."""
    pred = np.asarray(pred, dtype=np.int64).ravel()
    ref = np.asarray(ref, dtype=np.int64).ravel()
    keep = ref > 0
    pred, ref = pred[keep], ref[keep]
    labelled = pred > 0
    flat = (pred[labelled] - 1) * k + (ref[labelled] - 1)
    confusion = np.bincount(flat, minlength=k * k).reshape(k, k)
    missed = np.bincount(ref[~labelled] - 1, minlength=k)
    return confusion, missed


def iou_from_counts(confusion: np.ndarray, missed: np.ndarray) -> np.ndarray:
    """Per-class IoU; NaN for classes absent from the reference."""
    tp = np.diag(confusion).astype(np.float64)
    ref_count = confusion.sum(axis=0) + missed
    fp = confusion.sum(axis=1) - tp
    fn = ref_count - tp
    denom = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = tp / denom
    iou[ref_count == 0] = np.nan
    return iou


@dataclass
class EvalReport:
    confusion: np.ndarray  # k x k, rows = prediction, cols = reference
    missed: np.ndarray  # predicted background, per reference class
    per_class_iou: list[float | None]  # None = class absent from reference
    miou: float
    pixel_acc: float

    @property
    def num_classes(self) -> int:
        return self.confusion.shape[0]

    def to_dict(self, class_names: Sequence[str] | None = None) -> dict:
        names = list(class_names) if class_names else [f"class_{i}" for i in range(1, self.num_classes + 1)]
        return {
            "miou": self.miou,
            "pixel_acc": self.pixel_acc,
            "per_class_iou": {n: ("absent" if v is None else v) for n, v in zip(names, self.per_class_iou)},
            "confusion": self.confusion.tolist(),
            "missed": self.missed.tolist(),
        }


def evaluate(pred: LabelMap, ref: LabelMap, num_classes: int | None = None) -> EvalReport:
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, ref {ref.shape}")
    k = num_classes or max(pred.num_classes, ref.num_classes)
    confusion, missed = confusion_counts(pred.data, ref.data, k)
    iou = iou_from_counts(confusion, missed)
    per_class = [None if math.isnan(v) else float(v) for v in iou]
    defined = [v for v in per_class if v is not None]
    miou = float(np.mean(defined)) if defined else float("nan")
    total = int(confusion.sum() + missed.sum())
    acc = float(np.trace(confusion) / total) if total else float("nan")
    return EvalReport(confusion, missed, per_class, miou, acc)


def format_table(rows: Sequence[tuple[str, EvalReport]], class_names: Sequence[str] | None = None) -> str:
    """Aligned text table: mIoU, Acc, then one IoU column per class (all in percent)."""
    if not rows:
        return ""
    k = rows[0][1].num_classes
    names = list(class_names) if class_names else [f"class_{i}" for i in range(1, k + 1)]
    header = ["", "mIoU", "Acc."] + names
    body = []
    for label, rep in rows:
        cells = [label, f"{100 * rep.miou:.2f}", f"{100 * rep.pixel_acc:.2f}"]
        cells += ["-" if v is None else f"{100 * v:.2f}" for v in rep.per_class_iou]
        body.append(cells)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = [" | ".join(c.rjust(w) for c, w in zip(r, widths)) for r in [header] + body]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines)


def separability(features: np.ndarray, labels: np.ndarray) -> float:
    """Fisher ratio ``trace(S_between) / trace(S_within)`` of labelled samples.

    Returns 0 when every sample coincides and ``inf`` when classes have
    distinct means but no within-class spread.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).ravel()
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != y.size:
        raise ValueError("features and labels differ in length")
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise ValueError("separability needs at least 2 classes")
    if counts.min() < 2:
        raise ValueError("separability needs at least 2 samples per class")
    means = []
    within = 0.0
    for c in classes:
        xc = x[y == c]
        # exact mean for constant classes, so degenerate inputs give exact zeros
        mu = xc[0] if np.all(xc == xc[0]) else xc.mean(axis=0)
        means.append(mu)
        within += float(np.sum((xc - mu) ** 2))
    means = np.array(means)
    if np.all(means == means[0]):
        between = 0.0
    else:
        overall = (counts[:, None] * means).sum(axis=0) / counts.sum()
        between = float(np.sum(counts[:, None] * (means - overall) ** 2))
    if within == 0.0:
        return 0.0 if between == 0.0 else math.inf
    return between / within
