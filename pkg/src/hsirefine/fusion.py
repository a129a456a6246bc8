"""Spectral-prior / coarse-label fusion.

The prior is the classifier's argmax map with low-confidence pixels reset to
background. Each coarse class region is eroded with its own square kernel,
and the union of the eroded regions decides where the coarse label is
trusted; everywhere else the prior is used.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from hsirefine.cube import LabelMap
from hsirefine.metrics import confusion_counts, iou_from_counts

__all__ = [
    "FusionConfig",
    "KernelSearchResult",
    "softmax_confidence",
    "softmax_confidence_map",
    "apply_noise_control",
    "erode_class",
    "build_mask",
    "fuse",
    "refine",
    "search_kernel_sizes",
]


def _check_odd(size: int, what: str = "kernel size") -> int:
    size = int(size)
    if size < 1 or size % 2 == 0:
        raise ValueError(f"{what} must be odd and >= 1, got {size}")
    return size


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 0.7
    kernel_sizes: tuple[int, ...] = ()
    max_kernel: int = 11

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        _check_odd(self.max_kernel, "max_kernel")
        sizes = tuple(int(s) for s in self.kernel_sizes)
        for s in sizes:
            _check_odd(s)
            if s > self.max_kernel:
                raise ValueError(f"kernel size {s} exceeds max_kernel {self.max_kernel}")
        object.__setattr__(self, "kernel_sizes", sizes)

    def sizes_for(self, num_classes: int) -> tuple[int, ...]:
        """Per-class kernel sizes, defaulting to 1 (no erosion) when unset."""
        if not self.kernel_sizes:
            return (1,) * num_classes
        if len(self.kernel_sizes) != num_classes:
            raise ValueError(f"expected {num_classes} kernel sizes, got {len(self.kernel_sizes)}")
        return self.kernel_sizes


# --------------------------------------------------------------------------
# noise control


def softmax_confidence(logits) -> tuple[int, float]:
    """Return ``(class, confidence)`` for one pixel's logits.

    The class is 1-based (background is never predicted) and ties go to the
    lowest index.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("logits must be a non-empty vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    k = int(np.argmax(z))
    shifted = z - z[k]
    return k + 1, float(1.0 / np.exp(shifted).sum())


def softmax_confidence_map(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`softmax_confidence` over an ``H x W x k`` logit map."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    idx = np.argmax(z, axis=-1)
    top = np.take_along_axis(z, idx[..., None], axis=-1)
    conf = 1.0 / np.exp(z - top).sum(axis=-1)
    return (idx + 1).astype(np.uint8), conf


def apply_noise_control(logits: np.ndarray, alpha: float) -> LabelMap:
    """Argmax map where pixels with confidence strictly below ``alpha`` become background."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    z = np.asarray(logits)
    if z.ndim != 3:
        raise ValueError(f"logit map must be H x W x k, got shape {z.shape}")
    cls, conf = softmax_confidence_map(z)
    prior = np.where(conf < alpha, 0, cls).astype(np.uint8)
    return LabelMap(prior, z.shape[-1])


# --------------------------------------------------------------------------
# erosion and fusion


def erode_class(mask: np.ndarray, size: int) -> np.ndarray:
    """Binary erosion with a ``size x size`` square; outside the image counts as 0."""
    size = _check_odd(size)
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ValueError("mask must be 2-D")
    if size == 1:
        return m.copy()
    half = size // 2
    padded = np.pad(m, half, mode="constant", constant_values=False)
    # separable: rows then columns
    rows = sliding_window_view(padded, size, axis=0).all(axis=-1)
    return sliding_window_view(rows, size, axis=1).all(axis=-1)


def build_mask(coarse: LabelMap, kernel_sizes: Sequence[int]) -> np.ndarray:
    """Union of the per-class eroded coarse regions (True = keep coarse label)."""
    k = coarse.num_classes
    sizes = [_check_odd(s) for s in kernel_sizes]
    if len(sizes) != k:
        raise ValueError(f"expected {k} kernel sizes, got {len(sizes)}")
    total = np.zeros(coarse.shape, dtype=np.uint8)
    for cls, size in enumerate(sizes, start=1):
        region = coarse.data == cls
        if region.any():
            total += erode_class(region, size)
    # regions are disjoint and erosion only shrinks them
    assert total.max(initial=0) <= 1
    return total.astype(bool)


def fuse(coarse: LabelMap, prior: LabelMap, mask: np.ndarray) -> LabelMap:
    mask = np.asarray(mask).astype(bool)
    if coarse.shape != prior.shape or mask.shape != coarse.shape:
        raise ValueError(f"shape mismatch: coarse {coarse.shape}, prior {prior.shape}, mask {mask.shape}")
    k = max(coarse.num_classes, prior.num_classes)
    return LabelMap(np.where(mask, coarse.data, prior.data), k)


def refine(coarse: LabelMap, logits: np.ndarray, config: FusionConfig) -> LabelMap:
    prior = apply_noise_control(logits, config.alpha)
    mask = build_mask(coarse, config.sizes_for(coarse.num_classes))
    return fuse(coarse, prior, mask)


# --------------------------------------------------------------------------
# per-class kernel size selection


@dataclass
class KernelSearchResult:
    kernel_sizes: tuple[int, ...]
    candidates: tuple[int, ...]
    # iou_table[i][j]: IoU of class i+1 with that class at candidates[j], others at 1
    iou_table: list[list[float | None]] = field(default_factory=list)

    def to_dict(self, class_names: Sequence[str] | None = None) -> dict:
        k = len(self.kernel_sizes)
        names = list(class_names) if class_names else [f"class_{i}" for i in range(1, k + 1)]
        return {
            "kernel_sizes": list(self.kernel_sizes),
            "candidates": list(self.candidates),
            "classes": [
                {
                    "index": i + 1,
                    "name": names[i],
                    "selected": self.kernel_sizes[i],
                    "iou": {str(l): v for l, v in zip(self.candidates, self.iou_table[i])},
                }
                for i in range(k)
            ],
        }


def _as_frames(x) -> list[LabelMap]:
    return [x] if isinstance(x, LabelMap) else list(x)


def search_kernel_sizes(
    coarse: LabelMap | Sequence[LabelMap],
    prior: LabelMap | Sequence[LabelMap],
    reference: LabelMap | Sequence[LabelMap],
    max_kernel: int = 11,
) -> KernelSearchResult:
    """Pick, class by class, the odd kernel size in ``1..max_kernel`` maximising that class's IoU.

    Each class is searched with all other classes held at size 1. Counts are
    pooled over all given frames before computing IoU. Ties go to the
    smallest size.
    """
    max_kernel = _check_odd(max_kernel, "max_kernel")
    coarse_f, prior_f, ref_f = _as_frames(coarse), _as_frames(prior), _as_frames(reference)
    if not (len(coarse_f) == len(prior_f) == len(ref_f)) or not coarse_f:
        raise ValueError("coarse, prior and reference must hold the same, nonzero number of frames")
    k = coarse_f[0].num_classes
    candidates = tuple(range(1, max_kernel + 1, 2))
    present = np.zeros(k, dtype=bool)
    for r in ref_f:
        present |= np.bincount(r.data.ravel(), minlength=k + 1)[1 : k + 1] > 0

    selected: list[int] = []
    table: list[list[float | None]] = []
    for cls in range(1, k + 1):
        if not present[cls - 1]:
            warnings.warn(f"class {cls} absent from reference; kernel size defaults to 1", stacklevel=2)
            selected.append(1)
            table.append([None] * len(candidates))
            continue
        row: list[float | None] = []
        for size in candidates:
            sizes = [1] * k
            sizes[cls - 1] = size
            conf = np.zeros((k, k), dtype=np.int64)
            missed = np.zeros(k, dtype=np.int64)
            for c, p, r in zip(coarse_f, prior_f, ref_f):
                refined = fuse(c, p, build_mask(c, sizes))
                cc, mm = confusion_counts(refined.data, r.data, k)
                conf += cc
                missed += mm
            row.append(float(iou_from_counts(conf, missed)[cls - 1]))
        best = max(range(len(candidates)), key=lambda j: (row[j], -j))
        selected.append(candidates[best])
        table.append(row)
    return KernelSearchResult(tuple(selected), candidates, table)
