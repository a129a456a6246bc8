"""``hsirefine`` command line: synth, train, prior, refine, search-kernels, eval, viz.

Every subcommand writes its outputs atomically and drops a ``*.meta.json``
record (command, resolved config, config hash, seed, library versions) next
to its main output. Failures print one JSON line ``{"error": ..., "message": ...}``
on stderr and exit with status 1; usage errors exit with status 2.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import platform
import sys
from pathlib import Path
from typing import Any

import click
import numpy as np
from PIL import Image

import hsirefine
from hsirefine import classifier as clf
from hsirefine.cube import (
    Frame,
    LabelMap,
    Manifest,
    RgbImage,
    default_palette,
    default_rgb_response,
    load_cube,
    load_label,
    load_manifest,
    load_palette,
    project_to_rgb,
    save_cube,
    save_label,
    save_manifest,
)
from hsirefine.fusion import FusionConfig, apply_noise_control, build_mask, fuse, search_kernel_sizes
from hsirefine.io import atomic_write_bytes, configure_json_logging, derive_seed
from hsirefine.metrics import evaluate, format_table
from hsirefine.pipeline import rgb_cube
from hsirefine.synth import DegradeConfig, SceneConfig, degrade_labels, generate_scene
from hsirefine.viz import overlay

log = logging.getLogger("hsirefine.cli")


def stage_seed(seed: int, *names: str | int) -> int:
    return int(derive_seed(seed, *names).generate_state(1)[0])


def scene_response_for(cube) -> np.ndarray:
    return default_rgb_response(cube.wavelengths)


def _dump_json(doc: Any) -> bytes:
    return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode()


def write_json(path: str | Path, doc: Any) -> None:
    atomic_write_bytes(path, _dump_json(doc))


def write_meta(output: str | Path, command: str, config: dict[str, Any], seed: int | None) -> None:
    output = Path(output)
    meta_path = output / "meta.json" if output.is_dir() else output.with_name(output.name + ".meta.json")
    blob = json.dumps(config, sort_keys=True).encode()
    write_json(
        meta_path,
        {
            "command": command,
            "config": config,
            "config_sha256": hashlib.sha256(blob).hexdigest(),
            "seed": seed,
            "versions": {
                "hsirefine": hsirefine.__version__,
                "numpy": np.__version__,
                "python": platform.python_version(),
            },
        },
    )


def _merge(defaults: dict[str, Any], section: dict[str, Any] | None, flags: dict[str, Any]) -> dict[str, Any]:
    """defaults < config-file section < explicit flags."""
    out = dict(defaults)
    out.update(section or {})
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _int_list(text: str | None) -> tuple[int, ...] | None:
    if text is None:
        return None
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


def _save_png_rgb(arr: np.ndarray, path: str | Path) -> None:
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG", compress_level=6)
    atomic_write_bytes(path, buf.getvalue())


class Context:
    def __init__(self, config: dict[str, Any], seed: int, threads: int):
        self.config = config
        self.seed = seed
        self.threads = threads

    def section(self, name: str) -> dict[str, Any]:
        return dict(self.config.get(name, {}))


pass_ctx = click.make_pass_decorator(Context)


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="JSON config file; flags override it.")
@click.option("--seed", type=int, default=None, help="Global seed; per-stage seeds are derived from it.")
@click.option("--threads", type=click.IntRange(1), default=None, help="Cap on worker threads for tiled stages.")
@click.option("--log-level", type=click.Choice(["debug", "info", "warning", "error"]), default="warning", show_default=True)
@click.version_option(hsirefine.__version__, prog_name="hsirefine")
@click.pass_context
def cli(ctx: click.Context, config_path: str | None, seed: int | None, threads: int | None, log_level: str) -> None:
    """Refine coarse segmentation labels with a hyperspectral per-pixel prior."""
    configure_json_logging(getattr(logging, log_level.upper()))
    config = json.loads(Path(config_path).read_text()) if config_path else {}
    seed = seed if seed is not None else int(config.get("seed", 0))
    threads = threads if threads is not None else int(config.get("threads", 1))
    ctx.obj = Context(config, seed, threads)


# --------------------------------------------------------------------------
# synth


@cli.command()
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--frames", type=click.IntRange(1), default=1, show_default=True)
@click.option("--height", type=int)
@click.option("--width", type=int)
@click.option("--classes", "num_classes", type=int)
@click.option("--bands", type=int)
@click.option("--spectra-per-class", type=int)
@click.option("--noise-sigma", type=float)
@click.option("--region-scale", type=float)
@click.option("--metamer-pair", "metamer_pairs", multiple=True, help="Class pair 'a,b' forced to equal RGB; repeatable.")
@click.option("--shrink-radius", type=int)
@click.option("--jitter", "boundary_jitter", type=int)
@click.option("--drop-fraction", type=float)
@pass_ctx
def synth(ctx: Context, out_dir: str, frames: int, metamer_pairs, **flags) -> None:
    """Write synthetic cubes, fine/coarse labels, RGB renderings and a manifest."""
    scene_keys = {"height", "width", "num_classes", "bands", "spectra_per_class", "noise_sigma", "region_scale"}
    scene_flags = {k: v for k, v in flags.items() if k in scene_keys}
    if metamer_pairs:
        scene_flags["metamer_pairs"] = [list(_int_list(p)) for p in metamer_pairs]
    degrade_flags = {k: v for k, v in flags.items() if k not in scene_keys}
    scene_doc = _merge(SceneConfig().to_dict(), ctx.section("scene"), scene_flags)
    degrade_doc = _merge(DegradeConfig().to_dict(), ctx.section("degrade"), degrade_flags)
    scene_seed_fixed = "seed" in ctx.section("scene")
    degrade_seed_fixed = "seed" in ctx.section("degrade")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    used = []
    for i in range(frames):
        sc_doc = dict(scene_doc)
        dg_doc = dict(degrade_doc)
        if not scene_seed_fixed:
            sc_doc["seed"] = stage_seed(ctx.seed, "scene", i)
        elif i:
            sc_doc["seed"] = stage_seed(sc_doc["seed"], "scene", i)
        if not degrade_seed_fixed:
            dg_doc["seed"] = stage_seed(ctx.seed, "degrade", i)
        elif i:
            dg_doc["seed"] = stage_seed(dg_doc["seed"], "degrade", i)
        sc_cfg, dg_cfg = SceneConfig.from_dict(sc_doc), DegradeConfig.from_dict(dg_doc)
        scene = generate_scene(sc_cfg)
        coarse = degrade_labels(scene.fine, dg_cfg)
        stem = f"frame_{i:03d}"
        save_cube(scene.cube, out / f"{stem}.hsic")
        save_label(scene.fine, out / f"{stem}_fine.png")
        save_label(coarse, out / f"{stem}_coarse.png")
        project_to_rgb(scene.cube, scene.response).save_png(out / f"{stem}_rgb.png")
        entries.append(Frame(out / f"{stem}.hsic", out / f"{stem}_coarse.png", out / f"{stem}_fine.png"))
        used.append({"scene": sc_cfg.to_dict(), "degrade": dg_cfg.to_dict()})
        log.info("frame written", extra={"fields": {"frame": i, "stem": stem}})
    k = scene_doc["num_classes"]
    names = [e["name"] for e in default_palette(k)[1:]]
    save_manifest(Manifest(k, tuple(entries), tuple(names)), out / "manifest.json")
    write_meta(out, "synth", {"frames": used}, ctx.seed)
    click.echo(str(out / "manifest.json"))


# --------------------------------------------------------------------------
# train / prior


@cli.command("train")
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Model file to write.")
@click.option("--input", "input_kind", type=click.Choice(["hsi", "rgb"]), default="hsi", show_default=True,
              help="Train on the cubes or on their RGB rendering.")
@click.option("--epochs", type=int)
@click.option("--lr", "learning_rate", type=float)
@click.option("--weight-decay", type=float)
@click.option("--pixels-per-image", type=int)
@click.option("--cube-batch", type=int)
@click.option("--image-batch", type=int)
@click.option("--patch-size", type=int)
@click.option("--hidden", help="Comma-separated hidden layer widths.")
@pass_ctx
def train_cmd(ctx: Context, manifest: str, out: str, input_kind: str, hidden: str | None, **flags) -> None:
    """Train the spectral patch classifier on the manifest's coarse labels."""
    flags["hidden"] = _int_list(hidden)
    section = ctx.section("train")
    doc = _merge(clf.TrainConfig().to_dict(), section, flags)
    if "seed" not in section:
        doc["seed"] = stage_seed(ctx.seed, "train")
    config = clf.TrainConfig.from_dict(doc)
    man = load_manifest(manifest)
    transform = (lambda cube: rgb_cube(cube, scene_response_for(cube))) if input_kind == "rgb" else None

    lines: list[str] = []
    model = clf.train(
        man,
        config,
        input_kind=input_kind,
        input_transform=transform,
        on_epoch=lambda e, loss: lines.append(json.dumps({"epoch": e, "mean_loss": loss})),
    )
    clf.save_model(model, out)
    atomic_write_bytes(out + ".log.jsonl", ("\n".join(lines) + "\n").encode())
    write_meta(out, "train", {"train": config.to_dict(), "input": input_kind, "manifest": str(manifest)}, config.seed)
    click.echo(json.dumps({"model": out, "final_loss": model.final_loss}))


@cli.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--cube", "cube_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Logit map (.npy, H x W x k float64).")
@click.option("--label-out", type=click.Path(dir_okay=False), help="Also write the noise-controlled prior label PNG.")
@click.option("--alpha", type=float, help="Noise-control threshold for --label-out.")
@pass_ctx
def prior(ctx: Context, model_path: str, cube_path: str, out: str, label_out: str | None, alpha: float | None) -> None:
    """Predict dense logits (the spectral prior) for one cube."""
    model = clf.load_model(model_path)
    cube = load_cube(cube_path)
    if model.input_kind == "rgb":
        cube = rgb_cube(cube, scene_response_for(cube))
    logits = clf.predict_map(model, cube, threads=ctx.threads)
    buf = io.BytesIO()
    np.save(buf, logits.astype("<f8"), allow_pickle=False)
    atomic_write_bytes(out, buf.getvalue())
    fusion = FusionConfig(**_merge({"alpha": FusionConfig().alpha}, _pick(ctx.section("fusion"), "alpha"), {"alpha": alpha}))
    if label_out:
        save_label(apply_noise_control(logits, fusion.alpha), label_out)
    write_meta(out, "prior", {"model": model_path, "cube": cube_path, "alpha": fusion.alpha}, model.seed)


def _pick(d: dict[str, Any], *keys: str) -> dict[str, Any]:
    return {k: d[k] for k in keys if k in d}


# --------------------------------------------------------------------------
# refine / search-kernels


def _load_logits(path: str) -> np.ndarray:
    z = np.load(path, allow_pickle=False)
    if z.ndim != 3:
        raise ValueError(f"{path}: logit map must be H x W x k, got shape {z.shape}")
    return z


def _prior_label(logits: str | None, prior_png: str | None, alpha: float, k: int, shape) -> LabelMap:
    if (logits is None) == (prior_png is None):
        raise click.UsageError("give exactly one of --logits or --prior")
    if logits is not None:
        z = _load_logits(logits)
        if z.shape[:2] != tuple(shape) or z.shape[2] != k:
            raise ValueError(f"logit map {z.shape} does not match label {tuple(shape)} with {k} classes")
        return apply_noise_control(z, alpha)
    return load_label(prior_png, k, shape=shape)


def _fusion_config(ctx: Context, alpha, kernel_sizes, max_kernel=None) -> FusionConfig:
    doc = _merge(
        {"alpha": 0.7, "kernel_sizes": (), "max_kernel": 11},
        ctx.section("fusion"),
        {"alpha": alpha, "kernel_sizes": kernel_sizes, "max_kernel": max_kernel},
    )
    doc["kernel_sizes"] = tuple(doc["kernel_sizes"])
    if doc["kernel_sizes"]:
        doc["max_kernel"] = max(doc["max_kernel"], max(doc["kernel_sizes"]))
    return FusionConfig(**doc)


@cli.command("refine")
@click.option("--coarse", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--logits", type=click.Path(exists=True, dir_okay=False), help="Logit map from `prior`.")
@click.option("--prior", "prior_png", type=click.Path(exists=True, dir_okay=False), help="Prior label PNG (used as is).")
@click.option("--alpha", type=float)
@click.option("--kernel-sizes", help="Comma-separated per-class odd kernel sizes.")
@click.option("--kernels-json", type=click.Path(exists=True, dir_okay=False), help="Output of search-kernels.")
@click.option("--num-classes", type=int)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@pass_ctx
def refine_cmd(ctx, coarse, logits, prior_png, alpha, kernel_sizes, kernels_json, num_classes, out) -> None:
    """Fuse a coarse label with the spectral prior through class-wise eroded masks."""
    sizes = _int_list(kernel_sizes)
    if kernels_json:
        sizes = tuple(json.loads(Path(kernels_json).read_text())["kernel_sizes"])
    coarse_map = load_label(coarse, num_classes)
    config = _fusion_config(ctx, alpha, sizes)
    prior_map = _prior_label(logits, prior_png, config.alpha, coarse_map.num_classes, coarse_map.shape)
    mask = build_mask(coarse_map, config.sizes_for(coarse_map.num_classes))
    refined = fuse(coarse_map, prior_map, mask)
    save_label(refined, out, (load_palette(coarse) or {}).get("classes"))
    write_meta(
        out,
        "refine",
        {"coarse": coarse, "logits": logits, "prior": prior_png, "alpha": config.alpha,
         "kernel_sizes": list(config.sizes_for(coarse_map.num_classes))},
        None,
    )


@cli.command("search-kernels")
@click.option("--coarse", multiple=True, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--logits", multiple=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--prior", "prior_png", multiple=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--ref", multiple=True, required=True, type=click.Path(exists=True, dir_okay=False),
              help="Fine reference label; one per --coarse, matched by position.")
@click.option("--alpha", type=float)
@click.option("--max-kernel", type=int)
@click.option("--num-classes", type=int)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@pass_ctx
def search_kernels_cmd(ctx, coarse, logits, prior_png, ref, alpha, max_kernel, num_classes, out) -> None:
    """Select per-class erosion kernel sizes by IoU against fine references."""
    config = _fusion_config(ctx, alpha, None, max_kernel)
    sources = logits or prior_png
    if not (len(coarse) == len(ref) == len(sources)) or (logits and prior_png):
        raise click.UsageError("need matching counts of --coarse, --ref and one of --logits/--prior")
    coarse_maps, priors, refs = [], [], []
    for i, c in enumerate(coarse):
        cm = load_label(c, num_classes)
        coarse_maps.append(cm)
        priors.append(
            _prior_label(logits[i] if logits else None, prior_png[i] if prior_png else None,
                         config.alpha, cm.num_classes, cm.shape)
        )
        refs.append(load_label(ref[i], cm.num_classes, shape=cm.shape))
    result = search_kernel_sizes(coarse_maps, priors, refs, config.max_kernel)
    pal = load_palette(coarse[0])
    names = [e["name"] for e in pal["classes"][1:]] if pal else None
    doc = result.to_dict(names)
    doc["alpha"] = config.alpha
    doc["max_kernel"] = config.max_kernel
    write_json(out, doc)
    write_meta(out, "search-kernels", {"coarse": list(coarse), "ref": list(ref), "alpha": config.alpha,
                                       "max_kernel": config.max_kernel}, None)
    click.echo(json.dumps({"kernel_sizes": doc["kernel_sizes"]}))


# --------------------------------------------------------------------------
# eval / viz


@cli.command("eval")
@click.option("--pred", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--ref", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--num-classes", type=int)
@click.option("--out", type=click.Path(dir_okay=False), help="Write the report JSON here as well.")
@pass_ctx
def eval_cmd(ctx, pred, ref, num_classes, out) -> None:
    """Score a label map against a reference: IoU per class, mIoU, pixel accuracy."""
    ref_map = load_label(ref, num_classes)
    pred_map = load_label(pred, ref_map.num_classes, shape=ref_map.shape)
    report = evaluate(pred_map, ref_map, ref_map.num_classes)
    pal = load_palette(ref)
    names = [e["name"] for e in pal["classes"][1:]] if pal else None
    doc = report.to_dict(names)
    if out:
        write_json(out, doc)
        write_meta(out, "eval", {"pred": pred, "ref": ref}, None)
    click.echo(json.dumps(doc, sort_keys=True))
    click.echo(format_table([(Path(pred).stem, report)], names))


@cli.command()
@click.option("--label", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--base", type=click.Path(exists=True, dir_okay=False), help="RGB PNG to draw on.")
@click.option("--cube", "cube_path", type=click.Path(exists=True, dir_okay=False), help="Cube rendered to RGB as the base.")
@click.option("--alpha", type=click.FloatRange(0, 1), default=0.5, show_default=True)
@click.option("--num-classes", type=int)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@pass_ctx
def viz(ctx, label, base, cube_path, alpha, num_classes, out) -> None:
    """Draw a class-coloured overlay of a label map."""
    if (base is None) == (cube_path is None):
        raise click.UsageError("give exactly one of --base or --cube")
    lab = load_label(label, num_classes)
    if base:
        img = RgbImage.load_png(base)
    else:
        cube = load_cube(cube_path)
        img = project_to_rgb(cube, scene_response_for(cube))
    pal = load_palette(label)
    _save_png_rgb(overlay(lab, img, pal["classes"] if pal else None, alpha), out)
    write_meta(out, "viz", {"label": label, "base": base, "cube": cube_path, "alpha": alpha}, None)


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, prog_name="hsirefine", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.Abort:
        click.echo("Aborted!", err=True)
        return 1
    except Exception as e:  # noqa: BLE001 - single-line report for every failure
        click.echo(json.dumps({"error": type(e).__name__, "message": str(e)}), err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
