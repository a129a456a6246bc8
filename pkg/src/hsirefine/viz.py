"""Class-coloured overlays of label maps on RGB images."""

from __future__ import annotations

from typing import Any, Sequence

import numpy as np

from hsirefine.cube import LabelMap, RgbImage, default_palette


def palette_colors(palette: Sequence[dict[str, Any]] | None, num_classes: int) -> np.ndarray:
    """``(k+1) x 3`` uint8 colour table indexed by class."""
    entries = palette or default_palette(num_classes)
    table = np.zeros((num_classes + 1, 3), dtype=np.uint8)
    for e in entries:
        i = int(e["index"])
        if 0 <= i <= num_classes:
            table[i] = e["color"]
    return table


def overlay(label: LabelMap, base: RgbImage, palette=None, alpha: float = 0.5) -> np.ndarray:
    """Blend class colours over ``base``; background pixels keep the base colour.

    Works on 8-bit values so the result is exact: with ``A = round(255 * alpha)``,
    a labelled pixel becomes ``((255 - A) * base + A * color) / 255`` rounded
    half up. Returns an ``H x W x 3`` uint8 array.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    if label.shape != (base.height, base.width):
        raise ValueError(f"label {label.shape} and base {(base.height, base.width)} differ in size")
    a = int(round(255 * alpha))
    colors = palette_colors(palette, label.num_classes).astype(np.int64)
    rgb = base.to_uint8().astype(np.int64)
    num = (255 - a) * rgb + a * colors[label.data]
    blended = (2 * num + 255) // 510
    out = np.where((label.data > 0)[..., None], blended, rgb)
    return out.astype(np.uint8)
