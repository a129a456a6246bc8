"""Hyperspectral cube, RGB image and label-map containers plus their file I/O.

Cube container layout (all integers and floats little-endian)::

    offset size  field
    0      4     magic            b"HSIC"
    4      2     version          uint16 (currently 1)
    6      2     reserved         uint16 (0)
    8      4     height           uint32
    12     4     width            uint32
    16     4     bands            uint32
    20     8     wavelength_start float64, nm
    28     8     wavelength_step  float64, nm
    36     4     tile_size        uint32, pixels
    40     ...   payload          float32 values

The payload is tile-major: tiles are visited row by row over the tile grid,
and inside each tile the data is band-sequential (every band of the tile is
written as a contiguous row-major ``th x tw`` block before the next band).
Edge tiles are clipped to the image, so the payload always holds exactly
``height * width * bands`` values.
"""

from __future__ import annotations

import colorsys
import io
import json
import os
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

from hsirefine.io import atomic_write_bytes

__all__ = [
    "CUBE_MAGIC",
    "HEADER_SIZE",
    "CubeFormatError",
    "LabelRangeError",
    "HsiCube",
    "RgbImage",
    "LabelMap",
    "Patch",
    "CubeReader",
    "save_cube",
    "load_cube",
    "extract_patch",
    "project_to_rgb",
    "default_rgb_response",
    "save_label",
    "load_label",
    "default_palette",
    "Manifest",
    "Frame",
    "load_manifest",
    "save_manifest",
]

CUBE_MAGIC = b"HSIC"
CUBE_VERSION = 1
_HEADER = struct.Struct("<4sHHIIIddI")
HEADER_SIZE = _HEADER.size  # 40 bytes

# Hyperspectral City defaults: 129 bands from 450 nm in 4 nm steps.
DEFAULT_WAVELENGTH_START = 450.0
DEFAULT_WAVELENGTH_STEP = 4.0


class CubeFormatError(ValueError):
    """Raised when a cube file is corrupt or violates the cube invariants."""


class LabelRangeError(ValueError):
    """Raised when a label map holds a class index above the declared count."""


@dataclass(frozen=True, eq=False)
class HsiCube:
    """An ``H x W x D`` radiance volume normalised to [0, 1]."""

    data: np.ndarray
    wavelength_start: float = DEFAULT_WAVELENGTH_START
    wavelength_step: float = DEFAULT_WAVELENGTH_STEP
    tile_size: int = 64

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise CubeFormatError(f"cube data must be a non-empty H x W x D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise CubeFormatError("cube contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise CubeFormatError("cube values must lie in [0, 1]")
        if not self.wavelength_step > 0:
            raise CubeFormatError("wavelength_step must be positive")
        if int(self.tile_size) < 1:
            raise CubeFormatError("tile_size must be >= 1")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    @property
    def wavelengths(self) -> np.ndarray:
        return self.wavelength_start + self.wavelength_step * np.arange(self.bands)


@dataclass(frozen=True, eq=False)
class RgbImage:
    """``H x W x 3`` image with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValueError(f"RGB data must be H x W x 3, got shape {data.shape}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def to_cube(self, tile_size: int = 64) -> HsiCube:
        """View the image as a 3-band cube so the patch classifier can consume it."""
        return HsiCube(np.clip(self.data, 0.0, 1.0), wavelength_start=0.0, wavelength_step=1.0, tile_size=tile_size)

    def to_uint8(self) -> np.ndarray:
        return np.round(np.clip(self.data, 0.0, 1.0) * 255.0).astype(np.uint8)

    def save_png(self, path: str | os.PathLike) -> None:
        atomic_write_bytes(path, _png_bytes(Image.fromarray(self.to_uint8(), mode="RGB")))

    @classmethod
    def load_png(cls, path: str | os.PathLike) -> "RgbImage":
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        return cls(arr)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-pixel class indices; 0 is background, classes are 1..num_classes."""

    data: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError(f"label data must be 2-D, got shape {data.shape}")
        if not 1 <= self.num_classes <= 255:
            raise ValueError("num_classes must be in 1..255")
        if data.size and (data.min() < 0 or data.max() > self.num_classes):
            raise LabelRangeError(
                f"label value {int(data.max())} exceeds declared class count {self.num_classes}"
            )
        data = data.astype(np.uint8)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def one_hot(self) -> np.ndarray:
        """``H x W x k`` indicator array; background rows are all zero."""
        classes = np.arange(1, self.num_classes + 1, dtype=np.uint8)
        return (self.data[..., None] == classes).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class Patch:
    size: int
    center: tuple[int, int]
    data: np.ndarray

    @property
    def bands(self) -> int:
        return self.data.shape[2]


# --------------------------------------------------------------------------
# cube container


def _tile_grid(height: int, width: int, tile: int):
    for r0 in range(0, height, tile):
        for c0 in range(0, width, tile):
            yield r0, min(r0 + tile, height), c0, min(c0 + tile, width)


def cube_to_bytes(cube: HsiCube) -> bytes:
    header = _HEADER.pack(
        CUBE_MAGIC,
        CUBE_VERSION,
        0,
        cube.height,
        cube.width,
        cube.bands,
        float(cube.wavelength_start),
        float(cube.wavelength_step),
        int(cube.tile_size),
    )
    chunks = [header]
    for r0, r1, c0, c1 in _tile_grid(cube.height, cube.width, cube.tile_size):
        block = cube.data[r0:r1, c0:c1, :].transpose(2, 0, 1)
        chunks.append(np.ascontiguousarray(block, dtype="<f4").tobytes())
    return b"".join(chunks)


def save_cube(cube: HsiCube, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, cube_to_bytes(cube))


class CubeReader:
    """Random access to a cube file by tile.

    Tiles are read with positioned reads and kept in a small LRU cache, so a
    reader can be shared between threads.
    """

    def __init__(self, path: str | os.PathLike, cache_tiles: int = 64):
        self.path = Path(path)
        with open(self.path, "rb") as fh:
            raw = fh.read(HEADER_SIZE)
        if len(raw) < HEADER_SIZE:
            raise CubeFormatError(f"{self.path}: corrupt header (file shorter than {HEADER_SIZE} bytes)")
        magic, version, _, h, w, d, wl0, wlstep, tile = _HEADER.unpack(raw)
        if magic != CUBE_MAGIC:
            raise CubeFormatError(f"{self.path}: corrupt header (bad magic {magic!r})")
        if version != CUBE_VERSION:
            raise CubeFormatError(f"{self.path}: corrupt header (unsupported version {version})")
        if min(h, w, d) < 1 or tile < 1:
            raise CubeFormatError(f"{self.path}: corrupt header (zero dimension)")
        if not (np.isfinite(wlstep) and wlstep > 0 and np.isfinite(wl0)):
            raise CubeFormatError(f"{self.path}: corrupt header (bad wavelength grid)")
        expected = HEADER_SIZE + 4 * h * w * d
        actual = self.path.stat().st_size
        if actual != expected:
            raise CubeFormatError(
                f"{self.path}: size mismatch (header declares {expected} bytes, file has {actual})"
            )
        self.height, self.width, self.bands = h, w, d
        self.wavelength_start, self.wavelength_step, self.tile_size = wl0, wlstep, tile
        self._offsets: dict[tuple[int, int], tuple[int, int, int, int, int]] = {}
        offset = HEADER_SIZE
        for r0, r1, c0, c1 in _tile_grid(h, w, tile):
            self._offsets[(r0 // tile, c0 // tile)] = (offset, r0, r1, c0, c1)
            offset += 4 * (r1 - r0) * (c1 - c0) * d
        self._cache: OrderedDict[tuple[int, int], np.ndarray] = OrderedDict()
        self._cache_tiles = cache_tiles
        self._lock = threading.Lock()

    @property
    def tile_rows(self) -> int:
        return -(-self.height // self.tile_size)

    @property
    def tile_cols(self) -> int:
        return -(-self.width // self.tile_size)

    def read_tile(self, ty: int, tx: int) -> np.ndarray:
        """Return tile ``(ty, tx)`` as a ``th x tw x D`` float32 array."""
        key = (ty, tx)
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]
        try:
            offset, r0, r1, c0, c1 = self._offsets[key]
        except KeyError:
            raise IndexError(f"tile {key} outside {self.tile_rows}x{self.tile_cols} grid") from None
        th, tw = r1 - r0, c1 - c0
        count = th * tw * self.bands
        with open(self.path, "rb") as fh:
            fh.seek(offset)
            buf = fh.read(4 * count)
        block = np.frombuffer(buf, dtype="<f4").reshape(self.bands, th, tw)
        if not np.all(np.isfinite(block)):
            raise CubeFormatError(f"{self.path}: non-finite value in tile (row={ty}, col={tx})")
        if block.min() < 0.0 or block.max() > 1.0:
            raise CubeFormatError(f"{self.path}: value outside [0, 1] in tile (row={ty}, col={tx})")
        tile = np.ascontiguousarray(block.transpose(1, 2, 0), dtype=np.float32)
        tile.setflags(write=False)
        with self._lock:
            self._cache[key] = tile
            while len(self._cache) > self._cache_tiles:
                self._cache.popitem(last=False)
        return tile

    def read_region(self, r0: int, r1: int, c0: int, c1: int) -> np.ndarray:
        """Read rows ``r0:r1`` and columns ``c0:c1`` touching only the needed tiles."""
        if not (0 <= r0 < r1 <= self.height and 0 <= c0 < c1 <= self.width):
            raise IndexError(f"region [{r0}:{r1}, {c0}:{c1}] outside {self.height}x{self.width} cube")
        t = self.tile_size
        out = np.empty((r1 - r0, c1 - c0, self.bands), dtype=np.float32)
        for ty in range(r0 // t, (r1 - 1) // t + 1):
            for tx in range(c0 // t, (c1 - 1) // t + 1):
                tile = self.read_tile(ty, tx)
                tr0, tc0 = ty * t, tx * t
                a0, a1 = max(r0, tr0), min(r1, tr0 + tile.shape[0])
                b0, b1 = max(c0, tc0), min(c1, tc0 + tile.shape[1])
                out[a0 - r0 : a1 - r0, b0 - c0 : b1 - c0] = tile[a0 - tr0 : a1 - tr0, b0 - tc0 : b1 - tc0]
        return out

    def read_all(self) -> HsiCube:
        data = self.read_region(0, self.height, 0, self.width)
        return HsiCube(data, self.wavelength_start, self.wavelength_step, self.tile_size)


def load_cube(path: str | os.PathLike) -> HsiCube:
    return CubeReader(path, cache_tiles=0).read_all()


# --------------------------------------------------------------------------
# patches and RGB projection


def extract_patch(cube: HsiCube, x: int, y: int, size: int) -> Patch:
    """Cut the ``size x size`` window centred on row ``x``, column ``y``.

    Samples falling outside the image are mirror-reflected about the edge
    pixel (the edge itself is not repeated), so every pixel has a patch.
    """
    size = int(size)
    if size < 1 or size % 2 == 0:
        raise ValueError(f"patch size must be odd and >= 1, got {size}")
    if size > 2 * min(cube.height, cube.width) - 1:
        raise ValueError(f"patch size {size} too large for a {cube.height}x{cube.width} cube")
    if not (0 <= x < cube.height and 0 <= y < cube.width):
        raise IndexError(f"center ({x}, {y}) outside {cube.height}x{cube.width} cube")
    half = (size - 1) // 2
    rows = _reflect_index(np.arange(x - half, x + half + 1), cube.height)
    cols = _reflect_index(np.arange(y - half, y + half + 1), cube.width)
    return Patch(size, (x, y), cube.data[np.ix_(rows, cols)])


def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    idx = np.abs(idx)
    return np.where(idx >= n, 2 * (n - 1) - idx, idx)


def default_rgb_response(wavelengths: np.ndarray, width_nm: float = 40.0) -> np.ndarray:
    """Gaussian red/green/blue sensitivities, each row normalised to sum to 1.

    Bands far from all three centres (e.g. near infrared) get ~zero weight,
    which is what makes metamers between the visible and NIR part easy.
    """
    wl = np.asarray(wavelengths, dtype=np.float64)
    if wl.size == 3 and np.allclose(wl, [0.0, 1.0, 2.0]):
        return np.eye(3)
    centers = np.array([610.0, 540.0, 465.0])
    resp = np.exp(-0.5 * ((wl[None, :] - centers[:, None]) / width_nm) ** 2)
    # a grid that misses the visible range still needs a usable projection
    resp += 1e-12
    return resp / resp.sum(axis=1, keepdims=True)


def project_to_rgb(cube: HsiCube, response: np.ndarray) -> RgbImage:
    response = np.asarray(response, dtype=np.float64)
    if response.shape != (3, cube.bands):
        raise ValueError(f"response must have shape (3, {cube.bands}), got {response.shape}")
    if np.any(response < 0):
        raise ValueError("response weights must be nonnegative")
    sums = response.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        raise ValueError(f"response rows must sum to 1 (got {sums.tolist()})")
    rgb = np.einsum("hwb,cb->hwc", cube.data.astype(np.float64), response)
    return RgbImage(np.clip(rgb, 0.0, 1.0))


# --------------------------------------------------------------------------
# label maps


def _png_bytes(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def palette_path(label_path: str | os.PathLike) -> Path:
    p = Path(label_path)
    return p.with_name(p.stem + ".palette.json")


def default_palette(num_classes: int, names: list[str] | None = None) -> list[dict[str, Any]]:
    """Deterministic, well separated colours; index 0 is background."""
    entries = [{"index": 0, "name": "background", "color": [0, 0, 0]}]
    for i in range(1, num_classes + 1):
        hue = ((i - 1) * 0.618033988749895) % 1.0
        r, g, b = colorsys.hsv_to_rgb(hue, 0.75, 0.95)
        name = names[i - 1] if names and i - 1 < len(names) else f"class_{i}"
        entries.append({"index": i, "name": name, "color": [round(r * 255), round(g * 255), round(b * 255)]})
    return entries


def save_label(label: LabelMap, path: str | os.PathLike, palette: list[dict[str, Any]] | None = None) -> None:
    """Write an 8-bit single-channel PNG plus its ``.palette.json`` sidecar."""
    png = _png_bytes(Image.fromarray(np.ascontiguousarray(label.data), mode="L"))
    atomic_write_bytes(path, png)
    sidecar = {"num_classes": label.num_classes, "classes": palette or default_palette(label.num_classes)}
    atomic_write_bytes(palette_path(path), (json.dumps(sidecar, indent=2) + "\n").encode())


def load_palette(path: str | os.PathLike) -> dict[str, Any] | None:
    side = palette_path(path)
    if not side.exists():
        return None
    return json.loads(side.read_text())


def load_label(
    path: str | os.PathLike,
    num_classes: int | None = None,
    shape: tuple[int, int] | None = None,
) -> LabelMap:
    """Read a label PNG.

    The class count comes from ``num_classes`` when given, otherwise from the
    palette sidecar, otherwise from the largest value present.
    """
    with Image.open(path) as img:
        if img.mode not in ("L", "P"):
            raise ValueError(f"{path}: label must be a single-channel 8-bit image, got mode {img.mode}")
        data = np.array(img)
    if shape is not None and data.shape != tuple(shape):
        raise ValueError(f"{path}: label shape {data.shape} does not match cube {tuple(shape)}")
    if num_classes is None:
        side = load_palette(path)
        num_classes = int(side["num_classes"]) if side else max(int(data.max()), 1)
    if data.max() > num_classes:
        raise LabelRangeError(f"{path}: label value {int(data.max())} exceeds declared class count {num_classes}")
    return LabelMap(data, num_classes)


# --------------------------------------------------------------------------
# dataset manifest


@dataclass(frozen=True)
class Frame:
    cube: Path
    coarse: Path | None = None
    fine: Path | None = None


@dataclass(frozen=True)
class Manifest:
    """Training/validation frames; relative paths resolve against the manifest's directory."""

    num_classes: int
    frames: tuple[Frame, ...]
    class_names: tuple[str, ...] = ()
    extra: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)


def load_manifest(path: str | os.PathLike) -> Manifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    base = path.parent

    def resolve(p):
        return None if p is None else (base / p)

    frames = tuple(
        Frame(resolve(f["cube"]), resolve(f.get("coarse")), resolve(f.get("fine"))) for f in doc["frames"]
    )
    extra = {k: v for k, v in doc.items() if k not in ("num_classes", "frames", "class_names")}
    return Manifest(int(doc["num_classes"]), frames, tuple(doc.get("class_names", ())), extra)


def save_manifest(manifest: Manifest, path: str | os.PathLike) -> None:
    path = Path(path)
    base = path.parent.resolve()

    def rel(p):
        if p is None:
            return None
        p = Path(p).resolve()
        try:
            return p.relative_to(base).as_posix()
        except ValueError:
            return str(p)

    doc: dict[str, Any] = {"num_classes": manifest.num_classes}
    if manifest.class_names:
        doc["class_names"] = list(manifest.class_names)
    doc["frames"] = []
    for f in manifest.frames:
        entry = {"cube": rel(f.cube)}
        if f.coarse is not None:
            entry["coarse"] = rel(f.coarse)
        if f.fine is not None:
            entry["fine"] = rel(f.fine)
        doc["frames"].append(entry)
    doc.update(manifest.extra)
    atomic_write_bytes(path, (json.dumps(doc, indent=2, sort_keys=False) + "\n").encode())
