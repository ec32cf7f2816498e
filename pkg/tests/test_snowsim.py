import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snowattack import geometry, render, snowsim
from snowattack.fixtures import random_scene, translating_texture

from conftest import manual_field


def test_templates_deterministic():
    a, b = snowsim.make_templates(7), snowsim.make_templates(7)
    assert all(np.array_equal(x.mask, y.mask) for x, y in zip(a, b))
    assert len(a) == 12
    c = snowsim.make_templates(8)
    assert not all(np.array_equal(x.mask, y.mask) for x, y in zip(a, c))


def test_template_invariants():
    for t in snowsim.make_templates(3, count=6, resolution=21):
        assert t.mask.shape == (21, 21)
        assert t.mask.min() >= 0 and t.mask.max() == 1.0


def test_gaussian_template_shape():
    g = snowsim.make_templates(0)[0].mask
    c = g.shape[0] // 2
    assert g[c, c] == 1.0
    assert max(g[0, 0], g[0, -1], g[-1, 0], g[-1, -1]) < 0.05


def _sector_masses(mask, k, offset=0.0):
    n = mask.shape[0]
    c = np.linspace(-1, 1, n)
    yy, xx = np.meshgrid(c, c, indexing="ij")
    ang = (np.arctan2(yy, xx) - offset) % (2 * np.pi)
    sector = np.minimum((ang / (2 * np.pi / k)).astype(int), k - 1)
    return np.bincount(sector.ravel(), weights=mask.ravel(), minlength=k)


def test_star_templates_have_k_fold_symmetry():
    # fine grid: pixelization, not the shape, dominates the spread at small sizes
    for t in snowsim.make_templates(0, resolution=201)[1::2]:
        spreads = []
        for k in (5, 6, 7):
            m = _sector_masses(t.mask, k, offset=0.1)
            spreads.append((m.max() - m.min()) / m.mean())
        assert min(spreads) < 0.02


def test_template_argument_errors():
    with pytest.raises(ValueError):
        snowsim.make_templates(0, count=0)
    with pytest.raises(ValueError):
        snowsim.make_templates(0, resolution=4)


def test_empty_snowfield():
    sc = translating_texture(size=16)
    f = snowsim.init_snowfield(sc, 0)
    assert len(f) == 0 and f.flakes == []


def test_init_offsets_zero_and_theta_from_depth():
    sc = translating_texture(size=32)
    params = render.RenderParams.for_scene(sc)
    f = snowsim.init_snowfield(sc, 40, seed=3, params=params)
    assert not f.delta_t.any() and not f.delta_t1.any()
    assert np.allclose(f.theta, render.init_transparency(f.d_t, params), atol=1e-12)
    assert np.allclose(np.linalg.norm(f.direction), 1.0)
    assert (f.world_size > 0).all()


def test_fall_ratio_without_jitter():
    sc = translating_texture(size=32)
    f = snowsim.init_snowfield(sc, 30, direction=snowsim.SnowDirection(5, 2, 0.0), seed=1)
    mc = f.motion @ sc.pose_t.R.T
    assert np.allclose(mc[:, 1] / mc[:, 0], 2.5)
    assert np.allclose(mc[:, 2], 0.0)


def test_default_fall_speed_is_about_ten_pixels():
    sc = translating_texture(size=64)
    f = snowsim.init_snowfield(sc, 200, direction=snowsim.SnowDirection(jitter=0.0), seed=0)
    disp, ok = snowsim.flake_displacements(sc, f)
    median_depth = np.median(sc.depth_t)
    near = np.abs(f.d_t - median_depth) < 0.05
    assert np.allclose(np.linalg.norm(disp[near & ok], axis=1), 10.0, rtol=0.05)


def test_direction_rejects_bad_values():
    with pytest.raises(ValueError):
        snowsim.SnowDirection(down=0)
    with pytest.raises(ValueError):
        snowsim.SnowDirection(jitter=-1)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_init_deterministic_and_visible(seed):
    rng = np.random.default_rng(seed)
    sc = random_scene(rng, 16)
    a = snowsim.init_snowfield(sc, 25, seed=seed, fall_speed=0.2)
    b = snowsim.init_snowfield(sc, 25, seed=seed, fall_speed=0.2)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    assert geometry.visible_either(sc, a.X, a.motion).all()


def test_field_dict_roundtrip():
    sc = translating_texture(size=16)
    f = snowsim.init_snowfield(sc, 5, seed=2)
    g = snowsim.SnowField.from_dict(json.loads(json.dumps(f.to_dict())))
    for k in ("X", "motion", "w", "d_t", "template_id"):
        assert np.array_equal(getattr(f, k), getattr(g, k))
    assert len(g.subset([0, 2])) == 2


def test_ground_truth_without_flakes(static_scene):
    f = snowsim.init_snowfield(static_scene, 0)
    assert np.array_equal(snowsim.snow_ground_truth_flow(static_scene, f), static_scene.gt_flow)


def test_ground_truth_requires_background(static_scene):
    sc = static_scene
    bare = type(sc)(sc.frame_t, sc.frame_t1, sc.depth_t, sc.depth_t1, sc.pose_t, sc.pose_t1, None)
    with pytest.raises(ValueError):
        snowsim.snow_ground_truth_flow(bare, snowsim.init_snowfield(sc, 0))


def test_single_flake_carries_its_motion(static_scene):
    sc = static_scene
    f_px = sc.pose_t.fx
    d = 1.0
    X = geometry.unproject(sc.pose_t, 12.0, 14.0, d)
    motion = np.array([5 * d / f_px, 2 * d / f_px, 0.0])
    field = manual_field(sc, X, motion, w=6.0)
    flow = snowsim.snow_ground_truth_flow(sc, field)
    moved = np.any(flow != 0, axis=-1)
    assert moved[14, 12]
    assert np.allclose(flow[moved], [5.0, 2.0])
    assert 4 < moved.sum() < 200


def test_flake_behind_surface_leaves_background(static_scene):
    sc = static_scene
    X = geometry.unproject(sc.pose_t, 16.0, 16.0, 3.5)
    field = manual_field(sc, X, [0.01, 0.02, 0.0], w=6.0)
    assert np.array_equal(snowsim.snow_ground_truth_flow(sc, field), sc.gt_flow)


def test_ground_truth_changes_only_where_snow_is_visible():
    sc = translating_texture(size=48)
    params = render.RenderParams.for_scene(sc)
    field = snowsim.init_snowfield(sc, 60, seed=5, params=params)
    flow = snowsim.snow_ground_truth_flow(sc, field, params)
    I_t, _ = render.render_frame_t(sc, field, params)
    changed_flow = np.any(flow != sc.gt_flow, axis=-1)
    changed_img = np.any(I_t != sc.frame_t, axis=-1)
    assert changed_flow.any()
    assert not np.any(changed_flow & ~changed_img)
