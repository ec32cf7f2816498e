import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snowattack import attack as atk, snowsim
from snowattack.fixtures import translating_texture
from snowattack.flowvictim import EstimatorConfig

FAST = EstimatorConfig(hs_iterations=10, pyramid_levels=2)


def _brute_aee(f, g):
    total = 0.0
    for i in range(f.shape[0]):
        for j in range(f.shape[1]):
            du = f[i, j, 0] - g[i, j, 0]
            dv = f[i, j, 1] - g[i, j, 1]
            total += (du * du + dv * dv) ** 0.5
    return total / (f.shape[0] * f.shape[1])


def test_aee_examples():
    f = np.zeros((2, 2, 2))
    assert atk.aee(f, f) == 0.0
    g = f.copy()
    g[..., 0], g[..., 1] = 3.0, 4.0
    assert atk.aee(f, g) == 5.0
    h = f.copy()
    h[0, 0] = [3.0, 4.0]
    assert atk.aee(f, h) == 1.25
    with pytest.raises(ValueError):
        atk.aee(f, np.zeros((2, 3, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_aee_matches_loop(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 7, 2)) + (2,)
    f, g = rng.normal(0, 5, shape), rng.normal(0, 5, shape)
    assert abs(atk.aee(f, g) - _brute_aee(f, g)) < 1e-9


def test_aee_grad_matches_differences():
    rng = np.random.default_rng(0)
    f, g = rng.normal(size=(3, 4, 2)), rng.normal(size=(3, 4, 2))
    G = atk.aee_grad(f, g)
    h = 1e-6
    for idx in [(0, 0, 0), (1, 2, 1), (2, 3, 0)]:
        e = np.zeros_like(f)
        e[idx] = h
        num = (atk.aee(f + e, g) - atk.aee(f - e, g)) / (2 * h)
        assert G[idx] == pytest.approx(num, abs=1e-8)
    assert not atk.aee_grad(f, f).any()


def test_reparam_roundtrip_and_range():
    w = np.array([-50.0, -3.0, 0.0, 2.5, 50.0])
    th = atk.reparam_theta(w)
    assert np.all((th >= 0) & (th <= 1))
    assert th[2] == 0.5
    mid = w[1:4]
    assert np.allclose(atk.theta_to_logit(atk.reparam_theta(mid)), mid, atol=1e-12)


def _field(scene, n=3, seed=0):
    return snowsim.init_snowfield(scene, n, seed=seed)


def test_penalty_examples():
    sc = translating_texture(size=24)
    f = _field(sc, 1)
    f.d_t[:] = 2.0
    f.d_t1[:] = 2.0
    f.delta_t[0] = [1.0, 0.0, 0.0]
    assert atk.offset_penalty(f, 1000.0, 1000.0) == pytest.approx(500.0)
    f.d_t[:] = 4.0
    assert atk.offset_penalty(f, 1000.0, 1000.0) == pytest.approx(250.0)
    assert atk.offset_penalty(_field(sc, 0), 1.0, 1.0) == 0.0
    flow = np.zeros((24, 24, 2))
    assert atk.loss(flow, flow, f, 1000.0, 0.0) == pytest.approx(250.0)


def test_penalty_grad_matches_differences():
    sc = translating_texture(size=24)
    f = _field(sc, 4, seed=1)
    rng = np.random.default_rng(0)
    f.delta_t[:] = rng.normal(0, 0.1, f.delta_t.shape)
    f.delta_t1[:] = rng.normal(0, 0.1, f.delta_t1.shape)
    gt, gt1 = atk.offset_penalty_grad(f, 3.0, 5.0)
    h = 1e-6
    g = f.copy()
    g.delta_t1[2, 1] += h
    k = f.copy()
    k.delta_t1[2, 1] -= h
    num = (atk.offset_penalty(g, 3.0, 5.0) - atk.offset_penalty(k, 3.0, 5.0)) / (2 * h)
    assert gt1[2, 1] == pytest.approx(num, rel=1e-6)


@pytest.fixture(scope="module")
def small():
    sc = translating_texture(size=32)
    return sc, snowsim.init_snowfield(sc, 15, seed=0)


def test_frozen_groups_are_untouched(small):
    sc, f0 = small
    r = atk.attack(sc, f0, atk.AttackConfig(steps=3, optimize=("theta",), victim=FAST, lr_w=1.0))
    assert r.field.delta_t.tobytes() == f0.delta_t.tobytes()
    assert r.field.delta_t1.tobytes() == f0.delta_t1.tobytes()
    assert r.field.w.tobytes() != f0.w.tobytes()
    r = atk.attack(sc, f0, atk.AttackConfig(steps=3, optimize=("delta_t",), victim=FAST))
    assert r.field.w.tobytes() == f0.w.tobytes()
    assert r.field.delta_t1.tobytes() == f0.delta_t1.tobytes()


def test_zero_learning_rate_keeps_aee(small):
    sc, f0 = small
    r = atk.attack(sc, f0, atk.AttackConfig(steps=1, lr_delta=0.0, lr_w=0.0, victim=FAST))
    assert len(r.aee_target) == 2
    assert r.aee_target[0] == r.aee_target[1]


def test_loss_is_aee_without_penalty(small):
    sc, f0 = small
    r = atk.attack(sc, f0, atk.AttackConfig(steps=3, alpha_t=0, alpha_t1=0, lr_w=0.0, victim=FAST))
    assert r.loss == r.aee_target
    assert all(p == 0 for p in r.penalty)


def test_attack_keeps_theta_valid_and_is_deterministic(small):
    sc, f0 = small
    cfg = atk.AttackConfig(steps=4, lr_w=50.0, victim=FAST)
    a, b = atk.attack(sc, f0, cfg), atk.attack(sc, f0, cfg)
    th = a.field.theta
    assert np.all((th > 0) & (th < 1))
    assert a.loss == b.loss
    assert a.field.delta_t.tobytes() == b.field.delta_t.tobytes()
    assert a.flow.tobytes() == b.flow.tobytes()


def test_attack_does_not_mutate_input(small):
    sc, f0 = small
    before = f0.delta_t.copy()
    atk.attack(sc, f0, atk.AttackConfig(steps=2, victim=FAST))
    assert np.array_equal(f0.delta_t, before)


def test_self_transfer_equals_final(small):
    sc, f0 = small
    cfg = atk.AttackConfig(steps=3, victim=FAST)
    r = atk.attack(sc, f0, cfg)
    assert atk.evaluate_transfer(sc, r.field, FAST) == r.final_aee


def test_transfer_with_empty_field_is_clean_aee():
    sc = translating_texture(size=32)
    from snowattack.flowvictim import estimate_flow
    clean = atk.aee(estimate_flow(sc.frame_t, sc.frame_t1, FAST), np.zeros((32, 32, 2)))
    assert atk.evaluate_transfer(sc, _field(sc, 0), FAST) == clean


def test_custom_target(small):
    sc, f0 = small
    tgt = np.ones(sc.shape + (2,))
    cfg = atk.AttackConfig(steps=1, target=tgt, lr_delta=0, lr_w=0, victim=FAST)
    r = atk.attack(sc, f0, cfg)
    assert r.initial_aee == pytest.approx(atk.aee(r.initial_flow, tgt))
    with pytest.raises(ValueError):
        atk.AttackConfig(target=np.ones((3, 3, 2))).target_flow(sc.shape)


@pytest.mark.parametrize("kw", [dict(steps=0), dict(alpha_t=-1), dict(optimize=("bogus",)),
                                dict(target="random")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        atk.AttackConfig(**kw)


def test_optimize_order_normalized():
    assert atk.AttackConfig(optimize=("theta", "delta_t")).optimize == ("delta_t", "theta")
