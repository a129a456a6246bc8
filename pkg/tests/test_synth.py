import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsirefine.cube import LabelMap
from hsirefine.synth import DegradeConfig, SceneConfig, degrade_labels, generate_scene, make_metamer_pair


def small(**kw):
    base = dict(height=32, width=32, num_classes=4, bands=16, region_scale=8.0)
    base.update(kw)
    return SceneConfig(**base)


def test_noise_free_single_variant_is_constant_per_class():
    s = generate_scene(small(noise_sigma=0.0, spectra_per_class=1, seed=3))
    for c in range(1, 5):
        px = s.cube.data[s.fine.data == c]
        assert px.size
        assert np.all(px == px[0])


def test_same_seed_same_scene():
    a, b = generate_scene(small(seed=11)), generate_scene(small(seed=11))
    assert a.cube.data.tobytes() == b.cube.data.tobytes()
    assert a.fine.data.tobytes() == b.fine.data.tobytes()
    c = generate_scene(small(seed=12))
    assert a.cube.data.tobytes() != c.cube.data.tobytes()


def test_every_class_present():
    for seed in range(10):
        s = generate_scene(small(seed=seed, num_classes=6))
        assert set(np.unique(s.fine.data)) == set(range(1, 7))


def test_metamer_classes_share_rgb():
    s = generate_scene(SceneConfig(height=16, width=16, metamer_pairs=[(1, 2)], seed=5))
    a, b = s.archetypes[0], s.archetypes[1]
    rgb = s.response @ np.stack([a, b]).T
    assert np.max(np.abs(rgb[:, 0] - rgb[:, 1])) <= 1e-6
    assert np.linalg.norm(a - b) >= 0.1
    # variants of the pair stay metamers too
    for j in range(s.config.spectra_per_class):
        diff = s.class_spectra[0, j] - s.class_spectra[1, j]
        assert np.max(np.abs(s.response @ diff)) <= 1e-9


def test_scene_config_validation():
    with pytest.raises(ValueError, match="palette"):
        SceneConfig(num_classes=256)
    with pytest.raises(ValueError):
        SceneConfig(num_classes=1)
    with pytest.raises(ValueError):
        SceneConfig(metamer_pairs=[(1, 1)])
    with pytest.raises(ValueError):
        SceneConfig(metamer_pairs=[(1, 9)])
    with pytest.raises(ValueError):
        SceneConfig(region_scale=1)
    with pytest.raises(ValueError):
        SceneConfig(noise_sigma=-0.1)


def test_config_json_roundtrip():
    cfg = small(metamer_pairs=[(1, 2)], seed=4)
    assert SceneConfig.from_dict(cfg.to_dict()) == cfg
    d = DegradeConfig(shrink_radius=2, seed=9)
    assert DegradeConfig.from_dict(d.to_dict()) == d


# --------------------------------------------------------------------------
# metamers


def test_metamer_zero_magnitude():
    resp = np.random.default_rng(0).random((3, 10))
    base = np.full(10, 0.4)
    s1, s2 = make_metamer_pair(resp, base, 0.0)
    np.testing.assert_array_equal(s1, base)
    np.testing.assert_array_equal(s2, base)


def test_metamer_canonical_null_space():
    resp = np.eye(4)[:3]
    base = np.array([0.2, 0.4, 0.6, 0.5])
    s1, s2 = make_metamer_pair(resp, base, 0.3)
    np.testing.assert_array_equal(s1[:3], s2[:3])
    assert abs(abs(s2[3] - s1[3]) - 0.3) < 1e-12


def test_metamer_random_response():
    rng = np.random.default_rng(42)
    resp = rng.random((3, 129))
    resp /= resp.sum(axis=1, keepdims=True)
    base = np.full(129, 0.5)
    s1, s2 = make_metamer_pair(resp, base, 0.3, rng)
    assert np.linalg.norm(resp @ (s1 - s2)) <= 1e-9
    assert np.linalg.norm(s1 - s2) >= 0.9 * 0.3
    assert s2.min() >= 0 and s2.max() <= 1


def test_metamer_step_is_shortened_to_stay_in_range():
    resp = np.eye(4)[:3]
    base = np.array([0.2, 0.4, 0.6, 0.95])
    _, s2 = make_metamer_pair(resp, base, 0.5)
    # +e4 direction has room 0.05, -e4 has 0.5 -> flipped
    assert abs(s2[3] - 0.45) < 1e-12


def test_metamer_errors():
    with pytest.raises(ValueError, match="more bands"):
        make_metamer_pair(np.eye(3), np.full(3, 0.5), 0.1)
    resp = np.random.default_rng(0).random((3, 8)) + 0.1
    resp /= resp.sum(axis=1, keepdims=True)
    # a positive response forces mixed-sign null vectors, so from all-ones
    # neither direction stays inside [0, 1]
    with pytest.raises(ValueError, match="collapsed"):
        make_metamer_pair(resp, np.ones(8), 0.2)


# --------------------------------------------------------------------------
# degradation


def brute_erode(mask, r):
    h, w = mask.shape
    out = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            ok = True
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy, xx = y + dy, x + dx
                    if not (0 <= yy < h and 0 <= xx < w) or not mask[yy, xx]:
                        ok = False
            out[y, x] = ok
    return out


def test_identity_degradation():
    s = generate_scene(small(seed=1))
    coarse = degrade_labels(s.fine, DegradeConfig(0, 0, 0.0, seed=7))
    np.testing.assert_array_equal(coarse.data, s.fine.data)


def test_shrink_square():
    fine = np.zeros((16, 16), dtype=np.uint8)
    fine[3:13, 4:14] = 1
    coarse = degrade_labels(LabelMap(fine, 2), DegradeConfig(shrink_radius=2, boundary_jitter=0, drop_fraction=0))
    expect = brute_erode(fine == 1, 2)
    assert expect.sum() == 36
    np.testing.assert_array_equal(coarse.data == 1, expect)
    np.testing.assert_array_equal(np.argwhere(coarse.data).min(axis=0), [5, 6])


def test_drop_all_small_regions():
    fine = np.ones((20, 20), dtype=np.uint8)
    fine[2:4, 2:4] = 2  # 4 px
    fine[10:13, 10:13] = 3  # 9 px
    fine[15:19, 1:8] = 2  # 28 px
    lab = LabelMap(fine, 3)
    # component areas: 4, 9, 28, 359 -> median 18.5
    coarse = degrade_labels(lab, DegradeConfig(0, 0, drop_fraction=1.0))
    assert (coarse.data[2:4, 2:4] == 0).all()
    assert (coarse.data[10:13, 10:13] == 0).all()
    assert (coarse.data[15:19, 1:8] == 2).all()
    assert (coarse.data[fine == 1] == 1).all()


def test_empty_coarse_label_error():
    fine = LabelMap(np.ones((6, 6)), 2)
    with pytest.raises(ValueError, match="empty coarse label"):
        degrade_labels(fine, DegradeConfig(shrink_radius=5, boundary_jitter=0, drop_fraction=0))


def test_degradation_is_deterministic():
    s = generate_scene(small(seed=2))
    cfg = DegradeConfig(seed=3)
    assert degrade_labels(s.fine, cfg).data.tobytes() == degrade_labels(s.fine, cfg).data.tobytes()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), shrink=st.integers(0, 3), drop=st.floats(0, 1))
def test_no_jitter_means_perfect_precision(seed, shrink, drop):
    s = generate_scene(small(seed=seed))
    try:
        coarse = degrade_labels(s.fine, DegradeConfig(shrink, 0, drop, seed=seed))
    except ValueError:
        return
    labelled = coarse.data > 0
    assert np.array_equal(coarse.data[labelled], s.fine.data[labelled])
    # recall drops once anything is shrunk or dropped
    if shrink > 0:
        assert labelled.mean() < 1.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), shrink=st.integers(0, 2), jitter=st.integers(1, 3))
def test_spill_stays_near_true_boundaries(seed, shrink, jitter):
    s = generate_scene(small(seed=seed))
    coarse = degrade_labels(s.fine, DegradeConfig(shrink, jitter, 0.0, seed=seed))
    f, c = s.fine.data, coarse.data
    h, w = f.shape
    for y, x in np.argwhere((c > 0) & (c != f)):
        win = f[max(0, y - jitter) : y + jitter + 1, max(0, x - jitter) : x + jitter + 1]
        # the spilled pixel's class occurs within the jitter radius
        assert (win == c[y, x]).any()
