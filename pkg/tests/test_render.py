import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snowattack import geometry, gradcheck, render, snowsim
from snowattack.fixtures import random_scene, translating_texture
from snowattack.render import RenderParams, Stages
from snowattack.snowsim import FlakeTemplate

from conftest import manual_field


def test_flake_scale():
    assert render.flake_scale(0.1, 100, 5) == pytest.approx(2.0)
    assert render.flake_scale(0.1, 100, 10) == pytest.approx(render.flake_scale(0.1, 100, 5) / 2)
    with pytest.raises(ValueError):
        render.flake_scale(0.1, 100, 0.0)


def test_init_transparency():
    p = RenderParams(transparency_near=0.8, transparency_falloff=3.0)
    assert render.init_transparency(1e-9, p) == pytest.approx(0.8)
    assert render.init_transparency(3.0, p) == pytest.approx(0.8 / np.e)
    grid = render.init_transparency(np.linspace(0.01, 50, 400), p)
    assert np.all(np.diff(grid) <= 0)
    assert grid.min() == 0.02


def test_psf_in_focus_is_identity():
    p = RenderParams(focus_depth=4.0, aperture=3.0)
    m = np.random.default_rng(0).random((9, 9))
    assert np.array_equal(render.psf_blur(m, 4.0, p), m)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.3, 20.0))
def test_psf_preserves_mass(seed, d):
    p = RenderParams(focus_depth=4.0, aperture=6.0)
    m = np.random.default_rng(seed).random((11, 11))
    assert abs(render.psf_blur(m, d, p).sum() - m.sum()) < 1e-6


def test_psf_point_becomes_uniform_disk():
    p = RenderParams(focus_depth=1.0, aperture=4.0)   # r_b = 4 * |1/2 - 1| = 2
    assert render.psf_radius(2.0, p) == 2.0
    m = np.zeros((1, 1))
    m[0, 0] = 1.0
    out = render.psf_blur(m, 2.0, p)
    assert out.shape == (5, 5)
    yy, xx = np.mgrid[-2:3, -2:3]
    r = np.hypot(yy, xx)
    assert np.ptp(out[r <= 1.5]) < 1e-15
    assert np.all(out[r > 2.5] == 0)
    assert out[2, 2] > out[0, 2] > 0


def test_psf_radius_grid():
    p = RenderParams(focus_depth=2.0, aperture=1.0)
    r = render.psf_radius(np.array([0.3, 0.7, 1.0, 5.0]), p)
    assert np.all(np.round(r * 2) == r * 2)


def test_visibility_values_and_derivative():
    D = np.full((4, 4), 3.0)
    assert render.visibility(D, 1.5, 1.5, 0.5, 0.25) > 0.9999
    assert render.visibility(D, 1.5, 1.5, 3.0, 0.25) == 0.5
    d, h = 2.9, 1e-6
    num = (render.visibility(D, 1, 1, d + h, 0.25) - render.visibility(D, 1, 1, d - h, 0.25)) / (2 * h)
    v = render.visibility(D, 1, 1, d, 0.25)
    assert num == pytest.approx(-v * (1 - v) / 0.25, rel=1e-5)


def test_render_params_validation():
    with pytest.raises(ValueError):
        RenderParams(visibility_softness=0)
    with pytest.raises(ValueError):
        RenderParams(transparency_near=1.5)
    with pytest.raises(ValueError):
        RenderParams(aperture=-1)


def test_empty_field_is_identity():
    sc = translating_texture(size=24)
    f = snowsim.init_snowfield(sc, 0)
    I_t, I_t1, tape = render.render_pair(sc, f, RenderParams.for_scene(sc))
    assert np.array_equal(I_t, sc.frame_t) and np.array_equal(I_t1, sc.frame_t1)
    g = render.backward(tape, np.ones_like(I_t), np.ones_like(I_t1))
    assert g["delta_t"].shape == (0, 3)


def test_transparent_limit_gives_clean_frames():
    sc = translating_texture(size=32)
    f = snowsim.init_snowfield(sc, 30, seed=1)
    f.w[:] = -60.0
    I_t, I_t1, _ = render.render_pair(sc, f, RenderParams.for_scene(sc))
    assert np.abs(I_t - sc.frame_t).max() < 1e-6
    assert np.abs(I_t1 - sc.frame_t1).max() < 1e-6


def test_opaque_flat_flake_sets_flake_color(static_scene):
    sc = static_scene
    flat = [FlakeTemplate(np.ones((15, 15)), 0)]
    X = geometry.unproject(sc.pose_t, 16.0, 16.0, 1.0)
    f = manual_field(sc, X, [0, 0, 0], w=50.0, templates=flat,
                     world_size=snowsim.default_flake_size(sc, 5.0))
    p = RenderParams(focus_depth=1.0, aperture=0.0, visibility_softness=1e-3,
                     flake_color=(0.2, 0.9, 0.4))
    I_t, _, _ = render.render_pair(sc, f, p)
    assert np.abs(I_t[16, 16] - [0.2, 0.9, 0.4]).max() < 1e-12


def test_two_layer_over_formula(static_scene):
    sc = static_scene
    X = np.stack([geometry.unproject(sc.pose_t, 15.3, 16.2, 1.6),
                  geometry.unproject(sc.pose_t, 16.1, 15.6, 0.9)])
    f = manual_field(sc, X, [0, 0, 0], w=1.0)
    p = RenderParams.for_scene(sc)
    I_t, _, tape = render.render_pair(sc, f, p)
    ft = tape.frames[0]
    assert ft.order == [0, 1]          # far flake first
    alpha = []
    for k in (0, 1):
        y0, x0, a = ft._window(k)
        pad = 64
        full = np.zeros((sc.shape[0] + 2 * pad, sc.shape[1] + 2 * pad))
        full[pad + y0:pad + y0 + a.shape[0], pad + x0:pad + x0 + a.shape[1]] = a
        alpha.append(full[pad:-pad, pad:-pad, None])
    c = np.asarray(p.flake_color)
    ref = (1 - alpha[1]) * ((1 - alpha[0]) * sc.frame_t + alpha[0] * c) + alpha[1] * c
    assert np.abs(I_t - ref).max() < 1e-12


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(-30, 30))
def test_outputs_stay_in_unit_range(seed, wshift):
    rng = np.random.default_rng(seed)
    sc = random_scene(rng, 16)
    f = snowsim.init_snowfield(sc, 12, rng=rng, fall_speed=0.1, flake_size=0.4)
    f.w += wshift
    f.delta_t[:] = rng.normal(0, 0.1, f.delta_t.shape)
    I_t, I_t1, _ = render.render_pair(sc, f, RenderParams.for_scene(sc))
    for I in (I_t, I_t1):
        assert I.min() >= 0 and I.max() <= 1


def test_fully_occluded_flake_is_invisible(static_scene):
    sc = static_scene
    X = geometry.unproject(sc.pose_t, 16.0, 16.0, 7.0)       # surface at depth 2
    f = manual_field(sc, X, [0, 0.01, 0], w=5.0)
    I_t, I_t1, tape = render.render_pair(sc, f, RenderParams.for_scene(sc))
    assert np.abs(I_t - sc.frame_t).max() < 1e-6
    assert np.abs(I_t1 - sc.frame_t1).max() < 1e-6
    G = np.ones_like(I_t)
    g = render.backward(tape, G, G)
    assert max(np.abs(v).max() for v in g.values()) < 1e-6


def test_tape_replay_is_bit_exact():
    sc = translating_texture(size=32)
    f = snowsim.init_snowfield(sc, 40, seed=4)
    I_t, I_t1, tape = render.render_pair(sc, f, RenderParams.for_scene(sc))
    assert np.array_equal(tape.frames[0].replay(), I_t)
    assert np.array_equal(tape.frames[1].replay(), I_t1)


def test_one_pixel_step_translates_footprint(static_scene):
    sc = static_scene
    d = 1.3
    X = geometry.unproject(sc.pose_t, 14.25, 15.5, d)
    f = manual_field(sc, X, [0, 0, 0], rotation=0.4)
    p = RenderParams.for_scene(sc)
    _, _, tape0 = render.render_pair(sc, f, p)
    g = f.copy()
    g.delta_t[0, 0] = d / sc.pose_t.fx
    _, _, tape1 = render.render_pair(sc, g, p)
    a, b = tape0.frames[0].footprint(0), tape1.frames[0].footprint(0)
    assert b.origin == (a.origin[0], a.origin[1] + 1)
    assert np.abs(a.window - b.window).max() < 1e-9


def test_stages_change_the_image():
    sc = translating_texture(size=48)
    p = RenderParams.for_scene(sc)
    f = snowsim.init_snowfield(sc, 40, seed=2, params=p)
    seq = [Stages(False, False, False, False), Stages(True, False, False, False),
           Stages(True, True, False, False), Stages(True, True, True, False), render.FULL]
    imgs = [render.render_frame_t(sc, f, p, s)[0] for s in seq]
    for i in range(len(imgs)):
        for j in range(i + 1, len(imgs)):
            assert np.abs(imgs[i] - imgs[j]).max() > 1 / 255


def test_backward_zero_upstream_and_errors():
    sc = translating_texture(size=24)
    f = snowsim.init_snowfield(sc, 10, seed=0)
    p = RenderParams.for_scene(sc)
    I_t, _, tape = render.render_pair(sc, f, p)
    g = render.backward(tape, np.zeros_like(I_t), np.zeros_like(I_t))
    assert all(not v.any() for v in g.values())
    with pytest.raises(ValueError):
        render.backward(tape, np.zeros((3, 3, 3)), np.zeros_like(I_t))
    _, _, partial = render.render_pair(sc, f, p, Stages(blur=False))
    with pytest.raises(ValueError):
        render.backward(partial, np.zeros_like(I_t), np.zeros_like(I_t))


def test_backward_deterministic():
    sc = translating_texture(size=32)
    f = snowsim.init_snowfield(sc, 30, seed=6)
    p = RenderParams.for_scene(sc)
    G = np.random.default_rng(0).standard_normal(sc.frame_t.shape)
    runs = []
    for _ in range(2):
        _, _, tape = render.render_pair(sc, f, p)
        runs.append(render.backward(tape, G, G))
    for k in runs[0]:
        assert runs[0][k].tobytes() == runs[1][k].tobytes()


def test_gradients_match_finite_differences():
    rep = gradcheck.check_renderer([0, 1])
    assert rep.worst < gradcheck.RENDER_TOL
    assert all(g.checked > 0 for g in rep.groups.values())
