"""Per-pixel spectral patch classifier trained from coarse labels.

A sample is the ``S x S x D`` patch centred on a labelled pixel. The network
averages the patch per band, standardises the resulting spectrum with
statistics frozen at the start of training, and runs it through a small
tanh MLP producing one logit per class (classes 1..k, background excluded).
Training is plain mini-batch SGD on the softmax cross-entropy with L2
weight decay; gradients are written out by hand in float64.

Because the network only sees the per-band patch mean, dense prediction
computes that mean for every pixel at once with a separable box filter
instead of materialising patches.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from hsirefine.cube import HsiCube, LabelMap, Manifest, Patch, extract_patch, load_cube, load_label
from hsirefine.io import atomic_write_bytes, make_rng

__all__ = [
    "TrainConfig",
    "ClassifierModel",
    "TrainingDiverged",
    "cross_entropy_loss",
    "init_model",
    "pool_patches",
    "pooled_feature_map",
    "sample_training_pixels",
    "sample_training_cubes",
    "loss_and_grad",
    "train",
    "predict_map",
    "gradient_check",
    "save_model",
    "load_model",
]

log = logging.getLogger(__name__)

MODEL_MAGIC = b"HSIM"
MODEL_VERSION = 1
_PREFIX = struct.Struct("<4sHHI")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    weight_decay: float = 0.0005
    epochs: int = 30
    pixels_per_image: int = 10000
    cube_batch: int = 256
    image_batch: int = 6
    patch_size: int = 11
    hidden: tuple[int, ...] = (64,)
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be >= 0")
        for name in ("epochs", "pixels_per_image", "cube_batch", "image_batch", "patch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.patch_size % 2 == 0:
            raise ValueError("patch_size must be odd")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


def _layer_sizes(bands: int, hidden: Sequence[int], k: int) -> list[int]:
    return [bands, *hidden, k]


def _param_count(sizes: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


@dataclass(eq=False)
class ClassifierModel:
    patch_size: int
    bands: int
    num_classes: int
    hidden: tuple[int, ...]
    parameters: np.ndarray
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    input_kind: str = "hsi"
    seed: int = 0
    epochs_seen: int = 0
    loss_curve: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.hidden = tuple(int(h) for h in self.hidden)
        self.parameters = np.ascontiguousarray(self.parameters, dtype=np.float64)
        self.feature_mean = np.asarray(self.feature_mean, dtype=np.float64)
        self.feature_scale = np.asarray(self.feature_scale, dtype=np.float64)
        expected = _param_count(self.layer_sizes)
        if self.parameters.shape != (expected,):
            raise ValueError(f"parameter vector has {self.parameters.size} entries, architecture needs {expected}")
        if not np.all(np.isfinite(self.parameters)):
            raise ValueError("model parameters must be finite")
        if self.feature_mean.shape != (self.bands,) or self.feature_scale.shape != (self.bands,):
            raise ValueError("feature statistics must have one entry per band")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.patch_size, self.patch_size, self.bands)

    @property
    def layer_sizes(self) -> list[int]:
        return _layer_sizes(self.bands, self.hidden, self.num_classes)

    @property
    def final_loss(self) -> float | None:
        return self.loss_curve[-1] if self.loss_curve else None

    def layers(self, params: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        """(weight, bias) views into the flat parameter vector; weights are ``in x out``."""
        p = self.parameters if params is None else params
        out, pos = [], 0
        sizes = self.layer_sizes
        for a, b in zip(sizes[:-1], sizes[1:]):
            w = p[pos : pos + a * b].reshape(a, b)
            pos += a * b
            out.append((w, p[pos : pos + b]))
            pos += b
        return out

    def standardize(self, pooled: np.ndarray) -> np.ndarray:
        return (pooled - self.feature_mean) * self.feature_scale

    def logits_from_pooled(self, pooled: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
        h = self.standardize(np.asarray(pooled, dtype=np.float64))
        layers = self.layers(params)
        for w, b in layers[:-1]:
            h = np.tanh(h @ w + b)
        w, b = layers[-1]
        return h @ w + b

    def forward(self, patches: np.ndarray) -> np.ndarray:
        """Logits for a batch of ``N x S x S x D`` patches (or a single ``S x S x D`` patch)."""
        patches = np.asarray(patches)
        single = patches.ndim == 3
        if single:
            patches = patches[None]
        if patches.shape[1:] != self.input_shape:
            raise ValueError(f"patch shape {patches.shape[1:]} does not match model input {self.input_shape}")
        z = self.logits_from_pooled(pool_patches(patches))
        return z[0] if single else z


def init_model(
    bands: int,
    num_classes: int,
    patch_size: int = 11,
    hidden: Sequence[int] = (64,),
    seed: int = 0,
    feature_mean: np.ndarray | None = None,
    feature_scale: np.ndarray | None = None,
    input_kind: str = "hsi",
) -> ClassifierModel:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    rng = make_rng(seed, "init")
    sizes = _layer_sizes(bands, hidden, num_classes)
    chunks = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(a)
        chunks.append(rng.uniform(-bound, bound, size=a * b))
        chunks.append(np.zeros(b))
    return ClassifierModel(
        patch_size=patch_size,
        bands=bands,
        num_classes=num_classes,
        hidden=tuple(hidden),
        parameters=np.concatenate(chunks),
        feature_mean=np.zeros(bands) if feature_mean is None else feature_mean,
        feature_scale=np.ones(bands) if feature_scale is None else feature_scale,
        input_kind=input_kind,
        seed=seed,
    )


# --------------------------------------------------------------------------
# loss


def cross_entropy_loss(logits, c: int) -> float:
    """``-z[c] + logsumexp(z)`` for 0-based class index ``c``."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("logits must be a non-empty vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    if not 0 <= c < z.size:
        raise ValueError(f"class index {c} out of range for {z.size} logits")
    m = z.max()
    return float(m + math.log(np.exp(z - m).sum()) - z[c])


def _batch_loss_and_dlogits(z: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    n = z.shape[0]
    rows = np.arange(n)
    losses = (m[:, 0] + np.log(s[:, 0])) - z[rows, y]
    d = e / s
    d[rows, y] -= 1.0
    return float(losses.mean()), d / n


def loss_and_grad(
    model: ClassifierModel, pooled: np.ndarray, targets: np.ndarray, params: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the flat parameters.

    ``targets`` are 0-based class indices (class c is logit c-1).
    """
    p = model.parameters if params is None else params
    layers = model.layers(p)
    acts = [model.standardize(np.asarray(pooled, dtype=np.float64))]
    for w, b in layers[:-1]:
        acts.append(np.tanh(acts[-1] @ w + b))
    w, b = layers[-1]
    z = acts[-1] @ w + b
    loss, delta = _batch_loss_and_dlogits(z, np.asarray(targets))

    grads: list[np.ndarray] = []
    for li in range(len(layers) - 1, -1, -1):
        w, _ = layers[li]
        a = acts[li]
        grads.append(delta.sum(axis=0))
        grads.append((a.T @ delta).ravel())
        if li > 0:
            delta = (delta @ w.T) * (1.0 - a * a)
    grads.reverse()
    return loss, np.concatenate(grads)


# --------------------------------------------------------------------------
# features and sampling


def pool_patches(patches: np.ndarray) -> np.ndarray:
    """Per-band mean of each patch: ``N x S x S x D`` -> ``N x D``."""
    p = np.asarray(patches, dtype=np.float64)
    return p.sum(axis=1).sum(axis=1) / (p.shape[1] * p.shape[2])


def pooled_feature_map(cube: HsiCube, patch_size: int) -> np.ndarray:
    """Per-band patch mean for every pixel, mirror padding at the border (``H x W x D``).

    Equal to ``pool_patches`` of :func:`extract_patch` at every pixel up to
    float rounding.
    """
    s = int(patch_size)
    if s < 1 or s % 2 == 0:
        raise ValueError(f"patch size must be odd and >= 1, got {s}")
    if s > 2 * min(cube.height, cube.width) - 1:
        raise ValueError(f"patch size {s} too large for a {cube.height}x{cube.width} cube")
    x = cube.data.astype(np.float64)
    if s == 1:
        return x
    half = s // 2
    x = np.pad(x, ((half, half), (half, half), (0, 0)), mode="reflect")
    x = sliding_window_view(x, s, axis=0).sum(axis=-1)
    x = sliding_window_view(x, s, axis=1).sum(axis=-1)
    return x / (s * s)


def sample_training_pixels(
    coarse: LabelMap, count: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Up to ``count`` distinct labelled pixels, drawn uniformly: ``(rows, cols, classes)``."""
    flat = np.flatnonzero(coarse.data.ravel())
    if flat.size == 0:
        raise ValueError("coarse label has no labelled (non-background) pixels")
    take = min(count, flat.size)
    chosen = np.sort(rng.choice(flat, size=take, replace=False))
    rows, cols = np.divmod(chosen, coarse.shape[1])
    return rows, cols, coarse.data.ravel()[chosen].astype(np.int64)


def sample_training_cubes(
    cube: HsiCube, coarse: LabelMap, config: TrainConfig, rng: np.random.Generator | None = None
) -> list[tuple[Patch, int]]:
    """``(patch, class)`` pairs for up to ``pixels_per_image`` labelled pixels of one image."""
    if cube.data.shape[:2] != coarse.shape:
        raise ValueError("cube and label shapes differ")
    rng = rng if rng is not None else make_rng(config.seed, "sample")
    rows, cols, classes = sample_training_pixels(coarse, config.pixels_per_image, rng)
    return [
        (extract_patch(cube, int(r), int(c), config.patch_size), int(k)) for r, c, k in zip(rows, cols, classes)
    ]


# --------------------------------------------------------------------------
# training


FrameSource = Manifest | Sequence[tuple[HsiCube, LabelMap]]


def _frame_loader(frames: FrameSource, input_transform: Callable[[HsiCube], HsiCube] | None):
    if isinstance(frames, Manifest):
        usable = [f for f in frames.frames if f.coarse is not None]
        k = frames.num_classes

        def load(i: int) -> tuple[HsiCube, LabelMap]:
            cube = load_cube(usable[i].cube)
            coarse = load_label(usable[i].coarse, k, shape=cube.data.shape[:2])
            return cube, coarse

        n = len(usable)
    else:
        items = list(frames)
        k = max(lab.num_classes for _, lab in items) if items else 0

        def load(i: int) -> tuple[HsiCube, LabelMap]:
            return items[i]

        n = len(items)

    if input_transform is None:
        return n, k, load

    def load_t(i: int) -> tuple[HsiCube, LabelMap]:
        cube, lab = load(i)
        return input_transform(cube), lab

    return n, k, load_t


def _feature_stats(n: int, load, patch_size: int) -> tuple[np.ndarray, np.ndarray, int]:
    total = None
    sq = None
    count = 0
    bands = 0
    for i in range(n):
        cube, coarse = load(i)
        if cube.data.shape[:2] != coarse.shape:
            raise ValueError(f"frame {i}: cube {cube.data.shape[:2]} and label {coarse.shape} differ")
        feats = pooled_feature_map(cube, patch_size)[coarse.data > 0]
        bands = cube.bands
        if total is None:
            total, sq = np.zeros(bands), np.zeros(bands)
        total += feats.sum(axis=0)
        sq += (feats**2).sum(axis=0)
        count += feats.shape[0]
    if count == 0:
        raise ValueError("no labelled pixels in the training frames")
    mean = total / count
    std = np.sqrt(np.maximum(sq / count - mean**2, 0.0))
    return mean, 1.0 / np.maximum(std, 1e-3), bands


def train(
    frames: FrameSource,
    config: TrainConfig = TrainConfig(),
    *,
    input_kind: str = "hsi",
    input_transform: Callable[[HsiCube], HsiCube] | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> ClassifierModel:
    """Fit a classifier on the coarse labels of ``frames``.

    Each epoch walks the frames in a shuffled order, ``image_batch`` images
    at a time. From every image of a group up to ``pixels_per_image``
    labelled pixels are drawn without replacement; the group's samples are
    shuffled together and consumed in mini-batches of ``cube_batch``.
    """
    n, k, load = _frame_loader(frames, input_transform)
    if n == 0:
        raise ValueError("no frames with coarse labels")
    mean, scale, bands = _feature_stats(n, load, config.patch_size)
    model = init_model(
        bands, k, config.patch_size, config.hidden, config.seed, mean, scale, input_kind=input_kind
    )
    params = model.parameters.copy()
    rng = make_rng(config.seed, "train")
    lr, wd = config.learning_rate, config.weight_decay
    curve: list[float] = []

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, seen, step = 0.0, 0, 0
        for g0 in range(0, n, config.image_batch):
            feats, targets = [], []
            for i in order[g0 : g0 + config.image_batch]:
                cube, coarse = load(int(i))
                rows, cols, cls = sample_training_pixels(coarse, config.pixels_per_image, rng)
                feats.append(pooled_feature_map(cube, config.patch_size)[rows, cols])
                targets.append(cls - 1)
            x = np.concatenate(feats)
            y = np.concatenate(targets)
            perm = rng.permutation(x.shape[0])
            x, y = x[perm], y[perm]
            for b0 in range(0, x.shape[0], config.cube_batch):
                xb, yb = x[b0 : b0 + config.cube_batch], y[b0 : b0 + config.cube_batch]
                # overflow is caught below and reported as divergence
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, grad = loss_and_grad(model, xb, yb, params)
                    if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                        raise TrainingDiverged(f"loss became non-finite at epoch {epoch + 1}, step {step + 1}")
                    params -= lr * (grad + wd * params)
                total += loss * xb.shape[0]
                seen += xb.shape[0]
                step += 1
        mean_loss = total / seen
        curve.append(mean_loss)
        log.info("epoch done", extra={"fields": {"epoch": epoch + 1, "mean_loss": mean_loss}})
        if on_epoch is not None:
            on_epoch(epoch + 1, mean_loss)

    return replace(model, parameters=params, epochs_seen=config.epochs, loss_curve=curve)


# --------------------------------------------------------------------------
# inference


def predict_map(model: ClassifierModel, cube: HsiCube, threads: int = 1, tile_rows: int = 32) -> np.ndarray:
    """Dense ``H x W x k`` logits; every pixel, border ones via mirrored patches.

    Rows are processed in fixed tiles so the result does not depend on
    ``threads``.
    """
    if cube.bands != model.bands:
        raise ValueError(f"cube has {cube.bands} bands, model expects {model.bands}")
    pooled = pooled_feature_map(cube, model.patch_size)
    out = np.empty((cube.height, cube.width, model.num_classes), dtype=np.float64)

    def run(r0: int) -> None:
        r1 = min(r0 + tile_rows, cube.height)
        block = pooled[r0:r1].reshape(-1, model.bands)
        out[r0:r1] = model.logits_from_pooled(block).reshape(r1 - r0, cube.width, -1)

    starts = range(0, cube.height, tile_rows)
    if threads <= 1:
        for r0 in starts:
            run(r0)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, starts))
    return out


# --------------------------------------------------------------------------
# gradient check


def gradient_check(
    model: ClassifierModel,
    patches: np.ndarray,
    labels: Iterable[int],
    num_params: int = 100,
    step: float = 1e-5,
    seed: int = 0,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``labels`` are 1-based classes. Checks ``num_params`` randomly chosen
    parameters (all of them if the model has fewer). The relative error is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    params = getattr(model, "parameters", None)
    if params is None or np.asarray(params).size == 0:
        raise ValueError("no parameters")
    pooled = pool_patches(patches)
    y = np.asarray(list(labels), dtype=np.int64) - 1
    _, grad = loss_and_grad(model, pooled, y)
    rng = make_rng(seed, "gradcheck")
    idx = rng.choice(params.size, size=min(num_params, params.size), replace=False)
    worst = 0.0
    work = params.copy()
    for i in idx:
        orig = work[i]
        work[i] = orig + step
        up, _ = loss_and_grad(model, pooled, y, work)
        work[i] = orig - step
        down, _ = loss_and_grad(model, pooled, y, work)
        work[i] = orig
        numeric = (up - down) / (2 * step)
        err = abs(grad[i] - numeric) / max(abs(grad[i]), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# serialization


def model_to_bytes(model: ClassifierModel) -> bytes:
    header = {
        "architecture": {"pooling": "mean", "activation": "tanh", "hidden": list(model.hidden)},
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "input_kind": model.input_kind,
        "seed": model.seed,
        "epochs_seen": model.epochs_seen,
        "loss_curve": model.loss_curve,
        "feature_mean": model.feature_mean.tolist(),
        "feature_scale": model.feature_scale.tolist(),
        "num_parameters": int(model.parameters.size),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    return _PREFIX.pack(MODEL_MAGIC, MODEL_VERSION, 0, len(blob)) + blob + model.parameters.astype("<f8").tobytes()


def save_model(model: ClassifierModel, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, model_to_bytes(model))


def load_model(path: str | os.PathLike) -> ClassifierModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _PREFIX.size:
        raise ValueError(f"{path}: truncated model file")
    magic, version, _, hlen = _PREFIX.unpack_from(raw)
    if magic != MODEL_MAGIC or version != MODEL_VERSION:
        raise ValueError(f"{path}: not a model file (magic {magic!r}, version {version})")
    header = json.loads(raw[_PREFIX.size : _PREFIX.size + hlen])
    params = np.frombuffer(raw[_PREFIX.size + hlen :], dtype="<f8").astype(np.float64)
    if params.size != header["num_parameters"]:
        raise ValueError(f"{path}: expected {header['num_parameters']} parameters, found {params.size}")
    s, _, d = header["input_shape"]
    return ClassifierModel(
        patch_size=s,
        bands=d,
        num_classes=header["num_classes"],
        hidden=tuple(header["architecture"]["hidden"]),
        parameters=params,
        feature_mean=np.array(header["feature_mean"]),
        feature_scale=np.array(header["feature_scale"]),
        input_kind=header.get("input_kind", "hsi"),
        seed=header.get("seed", 0),
        epochs_seen=header.get("epochs_seen", 0),
        loss_curve=list(header.get("loss_curve", [])),
    )
