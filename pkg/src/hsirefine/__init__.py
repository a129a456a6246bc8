"""Refine coarse segmentation labels with a hyperspectral per-pixel prior."""

__version__ = "0.1.0"
