import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsirefine.classifier import (
    ClassifierModel,
    TrainConfig,
    TrainingDiverged,
    cross_entropy_loss,
    gradient_check,
    init_model,
    load_model,
    pool_patches,
    pooled_feature_map,
    predict_map,
    sample_training_cubes,
    sample_training_pixels,
    save_model,
    train,
)
from hsirefine.cube import HsiCube, LabelMap, extract_patch
from hsirefine.synth import SceneConfig, generate_scene

# mpmath, 30 digits
CE_123_2 = 0.407605964444380304
LN_10 = 2.302585092994045684


@pytest.fixture(scope="module")
def clean_scene():
    return generate_scene(SceneConfig(noise_sigma=0.0, spectra_per_class=1, seed=0))


@pytest.fixture(scope="module")
def small_scene():
    return generate_scene(SceneConfig(height=24, width=24, num_classes=3, bands=8, region_scale=8.0, seed=2))


def quick(**kw):
    base = dict(epochs=2, pixels_per_image=300, cube_batch=64, patch_size=3, hidden=(8,))
    base.update(kw)
    return TrainConfig(**base)


# --------------------------------------------------------------------------
# loss


def test_ce_uniform():
    assert abs(cross_entropy_loss(np.zeros(10), 7) - LN_10) <= 1e-15


def test_ce_hand_value():
    assert abs(cross_entropy_loss([1.0, 2.0, 3.0], 2) - CE_123_2) <= 1e-15


def test_ce_large_logit():
    with np.errstate(over="raise"):
        assert cross_entropy_loss([1000.0, 0.0], 0) == pytest.approx(0.0, abs=1e-300)


def test_ce_errors():
    with pytest.raises(ValueError):
        cross_entropy_loss([1.0, math.inf], 0)
    with pytest.raises(ValueError):
        cross_entropy_loss([1.0, 2.0], 2)
    with pytest.raises(ValueError):
        cross_entropy_loss([1.0, 2.0], -1)


@settings(max_examples=200, deadline=None)
@given(
    z=st.lists(st.floats(-30, 30), min_size=2, max_size=8),
    shift=st.floats(-100, 100),
    data=st.data(),
)
def test_ce_shift_invariance(z, shift, data):
    c = data.draw(st.integers(0, len(z) - 1))
    z = np.array(z)
    a = cross_entropy_loss(z, c)
    b = cross_entropy_loss(z + shift, c)
    assert abs(a - b) <= 1e-9
    assert a >= -1e-12


# --------------------------------------------------------------------------
# sampling


def test_sample_caps_at_available():
    d = np.zeros((20, 20), np.uint8)
    d.ravel()[np.random.default_rng(0).choice(400, 100, replace=False)] = 2
    samples = sample_training_cubes(
        HsiCube(np.zeros((20, 20, 2))), LabelMap(d, 2), TrainConfig(patch_size=3, pixels_per_image=10000)
    )
    assert len(samples) == 100
    assert all(c == 2 for _, c in samples)


def test_sample_uniform_label_no_duplicates():
    coarse = LabelMap(np.full((12, 12), 3), 3)
    rows, cols, cls = sample_training_pixels(coarse, 50, np.random.default_rng(5))
    assert len(rows) == 50
    coords = list(zip(rows.tolist(), cols.tolist()))
    assert len(set(coords)) == 50
    assert set(cls.tolist()) == {3}


def test_sample_all_background():
    with pytest.raises(ValueError, match="no labelled"):
        sample_training_pixels(LabelMap(np.zeros((4, 4)), 2), 10, np.random.default_rng(0))


def test_sample_is_seeded(small_scene):
    coarse = small_scene.fine
    cfg = TrainConfig(pixels_per_image=40, patch_size=3, seed=9)
    a = sample_training_cubes(small_scene.cube, coarse, cfg)
    b = sample_training_cubes(small_scene.cube, coarse, cfg)
    assert [(p.center, c) for p, c in a] == [(p.center, c) for p, c in b]
    for p, c in a:
        assert coarse.data[p.center] == c
        np.testing.assert_array_equal(p.data, extract_patch(small_scene.cube, *p.center, 3).data)


# --------------------------------------------------------------------------
# features


@pytest.mark.parametrize("size", [1, 3, 5, 7])
def test_pooled_map_matches_patches(small_scene, size):
    cube = small_scene.cube
    fmap = pooled_feature_map(cube, size)
    rng = np.random.default_rng(size)
    for x, y in zip(rng.integers(0, 24, 30), rng.integers(0, 24, 30)):
        pooled = pool_patches(extract_patch(cube, int(x), int(y), size).data[None])[0]
        np.testing.assert_allclose(fmap[x, y], pooled, rtol=0, atol=1e-12)
    # the corners exercise the mirrored border
    for x, y in [(0, 0), (0, 23), (23, 0), (23, 23)]:
        pooled = pool_patches(extract_patch(cube, x, y, size).data[None])[0]
        np.testing.assert_allclose(fmap[x, y], pooled, rtol=0, atol=1e-12)


def test_forward_checks_shape():
    m = init_model(4, 3, patch_size=3, hidden=(5,))
    with pytest.raises(ValueError, match="patch shape"):
        m.forward(np.zeros((2, 5, 5, 4)))
    assert m.forward(np.zeros((3, 3, 4))).shape == (3,)


def test_model_validation():
    m = init_model(4, 3, patch_size=3, hidden=(5,))
    with pytest.raises(ValueError, match="architecture"):
        replace(m, parameters=m.parameters[:-1])
    bad = m.parameters.copy()
    bad[0] = np.nan
    with pytest.raises(ValueError, match="finite"):
        replace(m, parameters=bad)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(patch_size=4)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ValueError):
        TrainConfig(cube_batch=0)
    assert TrainConfig.from_dict(TrainConfig(hidden=(3, 4)).to_dict()) == TrainConfig(hidden=(3, 4))


# --------------------------------------------------------------------------
# training


def test_noise_free_scene_is_learnt(clean_scene):
    s = clean_scene
    # every pixel of a class carries the same spectrum, so the nearest
    # archetype rule is a perfect classifier; check that first
    arch = s.archetypes
    dist = ((s.cube.data[..., None, :].astype(np.float64) - arch.astype(np.float32)) ** 2).sum(-1)
    assert (dist.argmin(-1) + 1 == s.fine.data).all()

    model = train([(s.cube, s.fine)], TrainConfig(learning_rate=0.05, patch_size=1, seed=0))
    assert len(model.loss_curve) == 30
    assert model.loss_curve[-1] < 0.01
    curve = model.loss_curve
    assert all(b <= a + 1e-3 for a, b in zip(curve, curve[1:]))
    pred = predict_map(model, s.cube).argmax(-1) + 1
    assert (pred == s.fine.data).mean() >= 0.99


def test_training_is_deterministic(small_scene):
    frames = [(small_scene.cube, small_scene.fine)]
    a = train(frames, quick(seed=4))
    b = train(frames, quick(seed=4))
    assert a.parameters.tobytes() == b.parameters.tobytes()
    assert a.loss_curve == b.loss_curve
    assert predict_map(a, small_scene.cube).tobytes() == predict_map(b, small_scene.cube).tobytes()
    c = train(frames, quick(seed=5))
    assert a.parameters.tobytes() != c.parameters.tobytes()


@pytest.mark.parametrize("wd", [0.0, 0.01])
def test_zero_learning_rate_keeps_parameters(small_scene, wd):
    # decay is scaled by the learning rate, so lr=0 freezes everything
    cfg = quick(learning_rate=0.0, weight_decay=wd)
    m = train([(small_scene.cube, small_scene.fine)], cfg)
    start = init_model(8, 3, 3, (8,), cfg.seed)
    np.testing.assert_array_equal(m.parameters, start.parameters)


def test_weight_decay_alone_shrinks(small_scene):
    # with an all-zero gradient path (zero targets impossible) compare decay on and off
    frames = [(small_scene.cube, small_scene.fine)]
    a = train(frames, quick(weight_decay=0.0, learning_rate=0.05))
    b = train(frames, quick(weight_decay=1.0, learning_rate=0.05))
    assert np.linalg.norm(b.parameters) < np.linalg.norm(a.parameters)


def test_divergence_is_reported(small_scene):
    with pytest.raises(TrainingDiverged, match=r"epoch \d+, step \d+"):
        train([(small_scene.cube, small_scene.fine)], quick(learning_rate=1e200, epochs=3))


def test_train_needs_labels(small_scene):
    with pytest.raises(ValueError, match="no labelled"):
        train([(small_scene.cube, LabelMap(np.zeros((24, 24)), 3))], quick())
    with pytest.raises(ValueError):
        train([], quick())


def test_epoch_callback(small_scene):
    seen = []
    train([(small_scene.cube, small_scene.fine)], quick(epochs=3), on_epoch=lambda e, l: seen.append(e))
    assert seen == [1, 2, 3]


def test_image_batches_over_several_frames():
    frames = []
    for seed in range(3):
        s = generate_scene(SceneConfig(height=16, width=16, num_classes=3, bands=6, region_scale=6.0, seed=seed))
        frames.append((s.cube, s.fine))
    m = train(frames, quick(image_batch=2, pixels_per_image=50, cube_batch=16))
    assert m.epochs_seen == 2 and len(m.loss_curve) == 2


# --------------------------------------------------------------------------
# inference


def test_zero_final_layer_gives_zero_logits(small_scene):
    m = init_model(8, 3, patch_size=3, hidden=(6,), seed=1)
    w, b = m.layers()[-1]
    w[:] = 0
    b[:] = 0
    assert not predict_map(m, small_scene.cube).any()


def test_one_pixel_cube():
    cube = HsiCube(np.random.default_rng(0).random((1, 1, 5), dtype=np.float32))
    m = init_model(5, 4, patch_size=1, hidden=(6,), seed=3)
    z = predict_map(m, cube)
    np.testing.assert_array_equal(z[0, 0], m.forward(extract_patch(cube, 0, 0, 1).data))


def test_dense_map_matches_forward(small_scene):
    m = init_model(8, 3, patch_size=5, hidden=(6,), seed=3)
    z = predict_map(m, small_scene.cube)
    for x, y in [(0, 0), (5, 17), (23, 23), (12, 0)]:
        np.testing.assert_allclose(z[x, y], m.forward(extract_patch(small_scene.cube, x, y, 5).data), atol=1e-12)


def test_threads_do_not_change_logits(small_scene):
    m = init_model(8, 3, patch_size=3, hidden=(6,), seed=3)
    one = predict_map(m, small_scene.cube, threads=1, tile_rows=5)
    many = predict_map(m, small_scene.cube, threads=8, tile_rows=5)
    assert one.tobytes() == many.tobytes()


def test_band_mismatch(small_scene):
    with pytest.raises(ValueError, match="bands"):
        predict_map(init_model(5, 3, patch_size=3), small_scene.cube)


def test_argmax_invariant_under_pixel_shift(small_scene):
    m = init_model(8, 3, patch_size=3, hidden=(6,), seed=3)
    z = predict_map(m, small_scene.cube)
    shifted = z + np.random.default_rng(0).integers(-8, 8, size=z.shape[:2])[..., None]
    np.testing.assert_array_equal(z.argmax(-1), shifted.argmax(-1))


# --------------------------------------------------------------------------
# gradients


@pytest.mark.parametrize("seed", range(10))
def test_gradient_check(seed):
    rng = np.random.default_rng(seed)
    m = init_model(6, 4, patch_size=3, hidden=(16,), seed=seed)
    m = replace(m, feature_mean=rng.random(6), feature_scale=rng.uniform(0.5, 2, 6))
    patches = rng.random((int(rng.integers(1, 20)), 3, 3, 6))
    labels = rng.integers(1, 5, size=patches.shape[0])
    assert gradient_check(m, patches, labels, num_params=100, seed=seed) <= 1e-5


def test_gradient_check_batch_of_one():
    rng = np.random.default_rng(0)
    m = init_model(5, 3, patch_size=1, hidden=(12, 7), seed=2)
    assert gradient_check(m, rng.random((1, 1, 1, 5)), [2], num_params=150) <= 1e-5


def test_gradient_check_no_parameters():
    class Empty:
        parameters = np.zeros(0)

    with pytest.raises(ValueError, match="no parameters"):
        gradient_check(Empty(), np.zeros((1, 1, 1, 1)), [1])


# --------------------------------------------------------------------------
# serialization


def test_model_roundtrip(tmp_path, small_scene):
    m = train([(small_scene.cube, small_scene.fine)], quick(hidden=(5, 4)), input_kind="rgb")
    save_model(m, tmp_path / "m.hsim")
    back = load_model(tmp_path / "m.hsim")
    assert isinstance(back, ClassifierModel)
    assert back.parameters.tobytes() == m.parameters.tobytes()
    assert back.feature_mean.tobytes() == m.feature_mean.tobytes()
    assert back.hidden == (5, 4) and back.input_kind == "rgb"
    assert back.loss_curve == m.loss_curve
    raw = (tmp_path / "m.hsim").read_bytes()
    assert raw[:4] == b"HSIM"
    # flat float64 parameters, little-endian, at the end of the file
    tail = np.frombuffer(raw[-8 * m.parameters.size :], dtype="<f8")
    np.testing.assert_array_equal(tail, m.parameters)


def test_model_file_errors(tmp_path):
    (tmp_path / "a").write_bytes(b"HS")
    with pytest.raises(ValueError, match="truncated"):
        load_model(tmp_path / "a")
    (tmp_path / "b").write_bytes(b"XXXX" + bytes(40))
    with pytest.raises(ValueError, match="not a model"):
        load_model(tmp_path / "b")
