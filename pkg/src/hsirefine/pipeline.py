"""End-to-end runs on synthetic scenes: synth -> train -> prior -> refine -> eval."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from hsirefine.classifier import ClassifierModel, TrainConfig, predict_map, train
from hsirefine.cube import HsiCube, LabelMap, project_to_rgb
from hsirefine.fusion import FusionConfig, apply_noise_control, build_mask, fuse
from hsirefine.metrics import EvalReport, evaluate
from hsirefine.synth import DegradeConfig, Scene, SceneConfig, degrade_labels, generate_scene


def rgb_cube(cube: HsiCube, response: np.ndarray) -> HsiCube:
    """The RGB rendering of ``cube`` as a 3-band cube (classifier input for the RGB baseline)."""
    return project_to_rgb(cube, response).to_cube(tile_size=cube.tile_size)


@dataclass
class SceneRun:
    scene: Scene
    coarse: LabelMap
    model: ClassifierModel
    logits: np.ndarray
    reports: dict[str, EvalReport] = field(default_factory=dict)

    def refined(self, fusion: FusionConfig) -> LabelMap:
        prior = apply_noise_control(self.logits, fusion.alpha)
        mask = build_mask(self.coarse, fusion.sizes_for(self.coarse.num_classes))
        return fuse(self.coarse, prior, mask)


def run_scene(
    scene_config: SceneConfig,
    degrade_config: DegradeConfig,
    train_config: TrainConfig,
    fusion_config: FusionConfig = FusionConfig(),
    *,
    use_rgb: bool = False,
    threads: int = 1,
) -> SceneRun:
    """Generate one scene, train on its coarse label, and score coarse, prior and refined labels."""
    scene = generate_scene(scene_config)
    coarse = degrade_labels(scene.fine, degrade_config)
    cube = rgb_cube(scene.cube, scene.response) if use_rgb else scene.cube
    model = train([(cube, coarse)], train_config, input_kind="rgb" if use_rgb else "hsi")
    logits = predict_map(model, cube, threads=threads)
    run = SceneRun(scene, coarse, model, logits)
    k = scene_config.num_classes
    run.reports["coarse"] = evaluate(coarse, scene.fine, k)
    run.reports["prior"] = evaluate(apply_noise_control(logits, 0.0), scene.fine, k)
    run.reports["refined"] = evaluate(run.refined(fusion_config), scene.fine, k)
    return run
