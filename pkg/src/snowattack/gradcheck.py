"""Finite-difference checks of the analytic gradients.

Samples whose central difference straddles a change of a flake's integer
splat anchor are skipped: the bilinear splat has a kink there and the
difference quotient is meaningless. Errors are reported per parameter group
as ``max |analytic - numeric| / max |numeric|`` over the checked samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attack as atk
from . import fixtures, render, snowsim
from .flowvictim import EstimatorConfig, estimate_flow, flow_input_gradient

RENDER_TOL = 1e-4
VICTIM_TOL = 1e-3
END_TO_END_TOL = 1e-3
PARAM_GROUPS = ("delta_t", "delta_t1", "w")


@dataclass
class GroupResult:
    error: float = 0.0
    checked: int = 0
    excluded: int = 0

    def merge(self, err, checked, excluded):
        self.error = max(self.error, err)
        self.checked += checked
        self.excluded += excluded


@dataclass
class CheckReport:
    name: str
    tolerance: float
    groups: dict = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max((g.error for g in self.groups.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def to_dict(self) -> dict:
        return {"tolerance": self.tolerance, "passed": self.passed, "worst": self.worst,
                "groups": {k: {"error": g.error, "checked": g.checked, "excluded": g.excluded}
                           for k, g in self.groups.items()}}


def _group_error(analytic, numeric, mask):
    if not np.any(mask):
        return 0.0
    scale = np.max(np.abs(numeric[mask]))
    diff = np.max(np.abs(analytic[mask] - numeric[mask]))
    return float(diff / scale) if scale > 0 else float(diff)


def check_scene(seed: int, size: int = 16, flakes: int = 5):
    """Small seeded scene and snowfield with nonzero offsets."""
    rng = np.random.default_rng(seed)
    scene = fixtures.random_scene(rng, size)
    params = render.RenderParams.for_scene(scene)
    unit = float(np.median(scene.depth_t)) / scene.pose_t.fx
    fld = snowsim.init_snowfield(scene, flakes, rng=rng, seed=seed, fall_speed=2 * unit,
                                 flake_size=2.5 * unit, params=params)
    fld.delta_t[:] = rng.normal(0.0, 0.3 * unit, fld.delta_t.shape)
    fld.delta_t1[:] = rng.normal(0.0, 0.3 * unit, fld.delta_t1.shape)
    return scene, fld, params


def _fd_groups(fld, fn, grads, h, report):
    """Central differences of ``fn(field) -> (value, anchors)`` for every entry."""
    for grp in PARAM_GROUPS:
        arr = getattr(fld, grp)
        num = np.zeros_like(arr)
        mask = np.ones(arr.shape, dtype=bool)
        for idx in np.ndindex(arr.shape):
            fp, fm = fld.copy(), fld.copy()
            getattr(fp, grp)[idx] += h
            getattr(fm, grp)[idx] -= h
            vp, ap = fn(fp)
            vm, am = fn(fm)
            num[idx] = (vp - vm) / (2 * h)
            mask[idx] = ap == am
        res = report.groups.setdefault(grp, GroupResult())
        res.merge(_group_error(grads[grp], num, mask), int(mask.sum()), int((~mask).sum()))


def _anchors(tape):
    return [f.anchors() for f in tape.frames]


def check_renderer(seeds, size=16, flakes=5, h=1e-3, corrupt=0.0) -> CheckReport:
    report = CheckReport("renderer", RENDER_TOL)
    for s in seeds:
        scene, fld, params = check_scene(s, size, flakes)
        rng = np.random.default_rng(10_000 + s)
        G1 = rng.standard_normal(scene.frame_t.shape)
        G2 = rng.standard_normal(scene.frame_t.shape)

        def fn(f):
            a, b, tape = render.render_pair(scene, f, params)
            return float(np.sum(G1 * a) + np.sum(G2 * b)), _anchors(tape)

        _, _, tape = render.render_pair(scene, fld, params)
        grads = render.backward(tape, G1, G2)
        grads = {k: v * (1.0 + corrupt) for k, v in grads.items()}
        _fd_groups(fld, fn, grads, h, report)
    return report


def check_victims(seeds, size=16, iterations=20, pixels=50, h=1e-4, corrupt=0.0) -> CheckReport:
    report = CheckReport("victims", VICTIM_TOL)
    for s in seeds:
        rng = np.random.default_rng(s)
        I1 = fixtures.texture(rng, (size, size))
        I2 = np.clip(np.roll(I1, 1, axis=1) + 0.02 * rng.standard_normal(I1.shape), 0, 1)
        for kind in ("horn_schunck", "lucas_kanade"):
            cfg = EstimatorConfig(kind=kind, hs_iterations=iterations)
            G = rng.standard_normal((size, size, 2))
            g1, g2 = flow_input_gradient(I1, I2, cfg, G)
            an, num = np.zeros(pixels), np.zeros(pixels)
            for k in range(pixels):
                which = int(rng.integers(2))
                i, j, c = (int(x) for x in rng.integers(0, [size, size, 3]))
                pair_p = [I1.copy(), I2.copy()]
                pair_m = [I1.copy(), I2.copy()]
                pair_p[which][i, j, c] += h
                pair_m[which][i, j, c] -= h
                fp = np.sum(G * estimate_flow(*pair_p, cfg))
                fm = np.sum(G * estimate_flow(*pair_m, cfg))
                num[k] = (fp - fm) / (2 * h)
                an[k] = (g1 if which == 0 else g2)[i, j, c] * (1.0 + corrupt)
            res = report.groups.setdefault(kind, GroupResult())
            res.merge(_group_error(an, num, np.ones(pixels, bool)), pixels, 0)
    return report


def check_end_to_end(seeds, size=16, flakes=5, h=1e-3, corrupt=0.0) -> CheckReport:
    report = CheckReport("end_to_end", END_TO_END_TOL)
    cfg = atk.AttackConfig(victim=EstimatorConfig(hs_iterations=20))
    for s in seeds:
        scene, fld, params = check_scene(s, size, flakes)

        def fn(f):
            (a, p), _, _, _, tape = atk.loss_and_grad(scene, f, params, cfg)
            return a + p, _anchors(tape)

        _, grads, _, _, _ = atk.loss_and_grad(scene, fld, params, cfg)
        grads = {k: v * (1.0 + corrupt) for k, v in grads.items()}
        _fd_groups(fld, fn, grads, h, report)
    return report


def run_all(seeds=range(10), size=16, corrupt=0.0) -> list[CheckReport]:
    seeds = list(seeds)
    return [check_renderer(seeds, size, corrupt=corrupt),
            check_victims(seeds[:5], size, corrupt=corrupt),
            check_end_to_end(seeds, size, corrupt=corrupt)]
