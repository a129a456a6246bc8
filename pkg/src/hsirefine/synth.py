"""Synthetic hyperspectral scenes with exact fine labels and degraded coarse labels.

Scenes are a seeded Voronoi partition of the image into regions. Every
region carries one class and one of that class's spectral variants. Pairs of
classes can be made metamers, meaning their spectra differ but project to
the same RGB under the scene's camera response.

Fine labels cover every pixel; there is no background in a synthetic scene.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
from scipy import ndimage

from hsirefine.cube import (
    DEFAULT_WAVELENGTH_START,
    DEFAULT_WAVELENGTH_STEP,
    HsiCube,
    LabelMap,
    default_rgb_response,
)
from hsirefine.fusion import erode_class
from hsirefine.io import make_rng

__all__ = [
    "SceneConfig",
    "DegradeConfig",
    "Scene",
    "generate_scene",
    "make_metamer_pair",
    "degrade_labels",
    "scene_response",
]


@dataclass(frozen=True)
class SceneConfig:
    height: int = 128
    width: int = 128
    num_classes: int = 6
    bands: int = 129
    spectra_per_class: int = 3
    noise_sigma: float = 0.03
    region_scale: float = 24.0
    metamer_pairs: tuple[tuple[int, int], ...] = ()
    metamer_magnitude: float = 0.3
    variant_scale: float = 0.04
    wavelength_start: float = DEFAULT_WAVELENGTH_START
    wavelength_step: float = DEFAULT_WAVELENGTH_STEP
    tile_size: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        pairs = tuple((int(a), int(b)) for a, b in self.metamer_pairs)
        object.__setattr__(self, "metamer_pairs", pairs)
        if self.height < 1 or self.width < 1 or self.bands < 1:
            raise ValueError("height, width and bands must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.num_classes > 255:
            raise ValueError("num_classes exceeds palette capacity (255)")
        if self.spectra_per_class < 1:
            raise ValueError("spectra_per_class must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.region_scale < 2:
            raise ValueError("region_scale must be >= 2")
        for a, b in pairs:
            if a == b or not (1 <= a <= self.num_classes and 1 <= b <= self.num_classes):
                raise ValueError(f"invalid metamer pair ({a}, {b})")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["metamer_pairs"] = [list(p) for p in self.metamer_pairs]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SceneConfig":
        d = dict(d)
        d["metamer_pairs"] = tuple(tuple(p) for p in d.get("metamer_pairs", ()))
        return cls(**d)

    @property
    def wavelengths(self) -> np.ndarray:
        return self.wavelength_start + self.wavelength_step * np.arange(self.bands)


@dataclass(frozen=True)
class DegradeConfig:
    shrink_radius: int = 3
    boundary_jitter: int = 1
    drop_fraction: float = 0.1
    # regions smaller than this quantile of region areas are candidates for dropping
    small_region_quantile: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.shrink_radius < 0 or self.boundary_jitter < 0:
            raise ValueError("shrink_radius and boundary_jitter must be >= 0")
        if not 0.0 <= self.drop_fraction <= 1.0:
            raise ValueError("drop_fraction must be in [0, 1]")
        if not 0.0 <= self.small_region_quantile <= 1.0:
            raise ValueError("small_region_quantile must be in [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DegradeConfig":
        return cls(**d)


@dataclass
class Scene:
    cube: HsiCube
    fine: LabelMap
    # class_spectra[c-1] is the (spectra_per_class x bands) variant table of class c
    class_spectra: np.ndarray
    response: np.ndarray
    config: SceneConfig = field(repr=False, default_factory=SceneConfig)

    @property
    def archetypes(self) -> np.ndarray:
        return self.class_spectra[:, 0, :]


def scene_response(config: SceneConfig) -> np.ndarray:
    return default_rgb_response(config.wavelengths)


# --------------------------------------------------------------------------
# metamers


def _null_direction(response: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Unit vector in the null space of ``response``; sign fixed so its largest entry is positive."""
    response = np.atleast_2d(np.asarray(response, dtype=np.float64))
    d = response.shape[1]
    _, s, vt = np.linalg.svd(response, full_matrices=True)
    rank = int(np.sum(s > s.max() * d * np.finfo(float).eps)) if s.size else 0
    null = vt[rank:]
    if null.shape[0] == 0:
        raise ValueError("response has an empty null space; need more bands than channels")
    v = null.T @ (null @ rng.standard_normal(d))
    v /= np.linalg.norm(v)
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    return v


def _max_step(bases: np.ndarray, v: np.ndarray, limit: float) -> float:
    """Largest ``t <= limit`` with ``bases + t*v`` inside [0, 1] for every row."""
    bases = np.atleast_2d(bases)
    t = float(limit)
    pos, neg = v > 0, v < 0
    if pos.any():
        t = min(t, float(((1.0 - bases[:, pos]) / v[pos]).min()))
    if neg.any():
        t = min(t, float((-bases[:, neg] / v[neg]).min()))
    return max(t, 0.0)


def _metamer_shift(
    response: np.ndarray, bases: np.ndarray, magnitude: float, rng: np.random.Generator
) -> np.ndarray:
    v = _null_direction(response, rng)
    if magnitude == 0:
        return np.zeros_like(v)
    up, down = _max_step(bases, v, magnitude), _max_step(bases, -v, magnitude)
    shift = up * v if up >= down else -down * v
    if np.linalg.norm(shift) < 1e-6:
        raise ValueError("metamer pair collapsed: base spectrum leaves no room inside [0, 1]")
    return shift


def make_metamer_pair(
    response: np.ndarray,
    base: np.ndarray,
    magnitude: float,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(base, base + t*v)`` with ``v`` a unit null-space vector of ``response``.

    ``t`` is ``magnitude`` unless that would leave [0, 1], in which case the
    step is shortened (and the sign of ``v`` flipped if that allows a longer
    step) so the two spectra still project identically.
    """
    response = np.asarray(response, dtype=np.float64)
    base = np.asarray(base, dtype=np.float64)
    if base.ndim != 1 or response.shape[-1] != base.size:
        raise ValueError("response columns must match the spectrum length")
    if base.size <= response.shape[0]:
        raise ValueError("need more bands than response channels for a metamer")
    if np.any(base < 0) or np.any(base > 1):
        raise ValueError("base spectrum must lie in [0, 1]")
    rng = rng if rng is not None else np.random.default_rng(0)
    shift = _metamer_shift(response, base, magnitude, rng)
    return base.copy(), base + shift


# --------------------------------------------------------------------------
# scene generation


def _smooth_spectrum(rng: np.random.Generator, x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """A few Gaussian bumps on a sloped baseline, rescaled into [lo, hi]."""
    s = rng.uniform(-1, 1) * (x - 0.5)
    for _ in range(3):
        c, w, a = rng.uniform(0, 1), rng.uniform(0.05, 0.25), rng.uniform(-1, 1)
        s = s + a * np.exp(-0.5 * ((x - c) / w) ** 2)
    span = s.max() - s.min()
    s = (s - s.min()) / span if span > 0 else np.full_like(x, 0.5)
    top = rng.uniform(lo + 0.5 * (hi - lo), hi)
    bottom = rng.uniform(lo, lo + 0.3 * (hi - lo))
    return bottom + (top - bottom) * s


def _class_spectra(config: SceneConfig, response: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    k, v, d = config.num_classes, config.spectra_per_class, config.bands
    x = np.linspace(0.0, 1.0, d) if d > 1 else np.array([0.5])
    spectra = np.empty((k, v, d))
    for c in range(k):
        arche = _smooth_spectrum(rng, x, 0.15, 0.85)
        spectra[c, 0] = arche
        for j in range(1, v):
            bump = _smooth_spectrum(rng, x, 0.0, 1.0) - 0.5
            spectra[c, j] = np.clip(arche + config.variant_scale * bump, 0.0, 1.0)
    for a, b in config.metamer_pairs:
        # one shared null-space shift keeps every variant of b a metamer of a's
        shift = _metamer_shift(response, spectra[a - 1], config.metamer_magnitude, rng)
        spectra[b - 1] = spectra[a - 1] + shift
    return spectra


def _voronoi(config: SceneConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    h, w, k = config.height, config.width, config.num_classes
    n_cells = max(k, int(round(h * w / config.region_scale**2)))
    n_cells = min(n_cells, h * w)
    seeds = rng.choice(h * w, size=n_cells, replace=False)
    sy, sx = np.divmod(seeds, w)
    cell_class = np.empty(n_cells, dtype=np.int64)
    first = min(k, n_cells)
    cell_class[:first] = rng.permutation(k)[:first] + 1
    cell_class[first:] = rng.integers(1, k + 1, size=n_cells - first)
    cells = np.empty((h, w), dtype=np.int64)
    cols = np.arange(w)
    for r in range(h):
        d2 = (r - sy[:, None]) ** 2 + (cols[None, :] - sx[:, None]) ** 2
        cells[r] = np.argmin(d2, axis=0)
    return cells, cell_class


def generate_scene(config: SceneConfig) -> Scene:
    """Build the cube and its exact fine label from ``config`` (bitwise reproducible)."""
    response = scene_response(config)
    spectra = _class_spectra(config, response, make_rng(config.seed, "spectra"))
    layout_rng = make_rng(config.seed, "layout")
    cells, cell_class = _voronoi(config, layout_rng)
    cell_variant = layout_rng.integers(0, config.spectra_per_class, size=cell_class.size)
    fine = cell_class[cells]
    clean = spectra[fine - 1, cell_variant[cells]]
    if config.noise_sigma > 0:
        noise = make_rng(config.seed, "noise").standard_normal(clean.shape)
        clean = np.clip(clean + config.noise_sigma * noise, 0.0, 1.0)
    cube = HsiCube(
        clean.astype(np.float32),
        wavelength_start=config.wavelength_start,
        wavelength_step=config.wavelength_step,
        tile_size=config.tile_size,
    )
    return Scene(cube, LabelMap(fine.astype(np.uint8), config.num_classes), spectra, response, config)


# --------------------------------------------------------------------------
# coarse annotation model


def degrade_labels(fine: LabelMap, config: DegradeConfig) -> LabelMap:
    """Simulate a coarse annotation of ``fine``.

    Steps, in order: drop a fraction of the small connected regions, erode
    each class by ``shrink_radius`` (square kernel), then translate every
    remaining connected region by a random offset of at most
    ``boundary_jitter`` pixels per axis, which can spill it over a true
    boundary.
    """
    rng = make_rng(config.seed, "degrade")
    k = fine.num_classes
    work = fine.data.copy()

    comps = []
    for cls in range(1, k + 1):
        lab, n = ndimage.label(fine.data == cls)
        for i in range(1, n + 1):
            comps.append(lab == i)
    if comps:
        areas = np.array([c.sum() for c in comps])
        threshold = np.quantile(areas, config.small_region_quantile)
        draws = rng.random(len(comps))
        for comp, area, u in zip(comps, areas, draws):
            if area < threshold and u < config.drop_fraction:
                work[comp] = 0

    if config.shrink_radius > 0:
        size = 2 * config.shrink_radius + 1
        shrunk = np.zeros_like(work)
        for cls in range(1, k + 1):
            shrunk[erode_class(work == cls, size)] = cls
        work = shrunk

    j = config.boundary_jitter
    if j > 0:
        h, w = work.shape
        moved = np.zeros_like(work)
        for cls in range(1, k + 1):
            lab, n = ndimage.label(work == cls)
            for i in range(1, n + 1):
                dy, dx = rng.integers(-j, j + 1, size=2)
                ys, xs = np.nonzero(lab == i)
                ys, xs = ys + dy, xs + dx
                ok = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
                moved[ys[ok], xs[ok]] = cls
        work = moved

    if not work.any():
        raise ValueError("empty coarse label")
    return LabelMap(work, k)


def dump_config(config: SceneConfig | DegradeConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"
