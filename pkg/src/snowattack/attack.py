"""Adversarial snow: loss, transparency reparametrization and the optimization loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import render
from .flowvictim import EstimatorConfig, flow_backward, flow_forward, rgb_grad
from .render import RenderParams, logit, sigmoid
from .scenefmt import ScenePair

log = logging.getLogger(__name__)

GROUPS = ("delta_t", "delta_t1", "theta")
MOMENTUM = 0.9


class AttackDiverged(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


def reparam_theta(w):
    return sigmoid(w)


def theta_to_logit(theta):
    return logit(theta)


def aee(f, g) -> float:
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if f.shape != g.shape:
        raise ValueError(f"flow shapes differ: {f.shape} vs {g.shape}")
    return float(np.mean(np.linalg.norm(f - g, axis=-1)))


def aee_grad(f, g) -> np.ndarray:
    """d AEE / d f, using subgradient 0 where the fields coincide."""
    diff = np.asarray(f, dtype=np.float64) - g
    norm = np.linalg.norm(diff, axis=-1, keepdims=True)
    n = diff.shape[0] * diff.shape[1]
    safe = np.where(norm > 0, norm, 1.0)
    return np.where(norm > 0, diff / safe, 0.0) / n


def offset_penalty(field, alpha_t: float, alpha_t1: float) -> float:
    """Inverse-depth weighted squared offsets, averaged over flakes."""
    n = len(field)
    if n == 0:
        return 0.0
    if np.any(field.d_t <= 0) or np.any(field.d_t1 <= 0):
        raise ValueError("flake depths must be positive")
    pt = np.sum(np.sum(field.delta_t ** 2, axis=1) / field.d_t)
    pt1 = np.sum(np.sum(field.delta_t1 ** 2, axis=1) / field.d_t1)
    return float(alpha_t / n * pt + alpha_t1 / n * pt1)


def offset_penalty_grad(field, alpha_t, alpha_t1):
    n = max(len(field), 1)
    return (2 * alpha_t / n * field.delta_t / field.d_t[:, None],
            2 * alpha_t1 / n * field.delta_t1 / field.d_t1[:, None])


def loss(f_check, f_target, field, alpha_t: float, alpha_t1: float) -> float:
    return aee(f_check, f_target) + offset_penalty(field, alpha_t, alpha_t1)


@dataclass
class AttackConfig:
    target: str | np.ndarray = "zero_flow"
    alpha_t: float = 1000.0
    alpha_t1: float = 1000.0
    steps: int = 250
    lr_delta: float = 1e-3
    lr_w: float = 0.1
    optimize: tuple = GROUPS
    victim: EstimatorConfig = field(default_factory=EstimatorConfig)
    seed: int = 0

    def __post_init__(self):
        if self.alpha_t < 0 or self.alpha_t1 < 0:
            raise ValueError("offset penalty weights must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        self.optimize = tuple(g for g in GROUPS if g in set(self.optimize))
        if not self.optimize:
            raise ValueError("optimize must name at least one of " + ", ".join(GROUPS))
        if isinstance(self.target, str) and self.target != "zero_flow":
            raise ValueError(f"unknown target {self.target!r}")

    def target_flow(self, shape) -> np.ndarray:
        if isinstance(self.target, str):
            return np.zeros(tuple(shape) + (2,))
        t = np.asarray(self.target, dtype=np.float64)
        if t.shape != tuple(shape) + (2,):
            raise ValueError("target flow does not match the scene size")
        return t


@dataclass
class AttackResult:
    loss: list
    aee_target: list
    penalty: list
    aee_gt: list
    field: object
    flow: np.ndarray
    initial_flow: np.ndarray
    frames: tuple

    @property
    def initial_aee(self) -> float:
        return self.aee_target[0]

    @property
    def final_aee(self) -> float:
        return self.aee_target[-1]


def loss_and_grad(scene, fld, params, cfg: AttackConfig, target=None):
    """Forward pass plus analytic gradients of the attack loss.

    Returns ``(trace_values, grads, frames, flow, render_tape)`` where grads
    holds ``delta_t``, ``delta_t1`` and ``w``.
    """
    target = cfg.target_flow(scene.shape) if target is None else target
    I_t, I_t1, rtape = render.render_pair(scene, fld, params)
    ftape = flow_forward(I_t, I_t1, cfg.victim)
    flow = ftape.flow
    a = aee(flow, target)
    p = offset_penalty(fld, cfg.alpha_t, cfg.alpha_t1)
    g1, g2 = flow_backward(ftape, aee_grad(flow, target))
    grads = render.backward(rtape, rgb_grad(g1), rgb_grad(g2))
    pen_t, pen_t1 = offset_penalty_grad(fld, cfg.alpha_t, cfg.alpha_t1)
    grads["delta_t"] = grads["delta_t"] + pen_t
    grads["delta_t1"] = grads["delta_t1"] + pen_t1
    return (a, p), grads, (I_t, I_t1), flow, rtape


def attack(scene: ScenePair, field0, cfg: AttackConfig, params: RenderParams | None = None,
           gt_params: RenderParams | None = None, callback=None) -> AttackResult:
    """Gradient descent with momentum on the groups in ``cfg.optimize``.

    The trace holds ``steps + 1`` entries; entry 0 is the random initial snow.
    """
    from .snowsim import snow_ground_truth_flow

    params = params or RenderParams.for_scene(scene)
    target = cfg.target_flow(scene.shape)
    fld = field0.copy()
    vel = {"delta_t": np.zeros_like(fld.delta_t), "delta_t1": np.zeros_like(fld.delta_t1),
           "theta": np.zeros_like(fld.w)}
    lr = {"delta_t": cfg.lr_delta, "delta_t1": cfg.lr_delta, "theta": cfg.lr_w}
    tr = dict(loss=[], aee_target=[], penalty=[], aee_gt=[])
    initial_flow = None
    for step in range(cfg.steps + 1):
        last = step == cfg.steps
        if last:
            I_t, I_t1, _ = render.render_pair(scene, fld, params)
            flow = flow_forward(I_t, I_t1, cfg.victim).flow
            a, p = aee(flow, target), offset_penalty(fld, cfg.alpha_t, cfg.alpha_t1)
        else:
            (a, p), grads, (I_t, I_t1), flow, _ = loss_and_grad(scene, fld, params, cfg, target)
        total = a + p
        tr["loss"].append(total)
        tr["aee_target"].append(a)
        tr["penalty"].append(p)
        if scene.gt_flow is not None:
            tr["aee_gt"].append(aee(flow, snow_ground_truth_flow(scene, fld, gt_params or params)))
        if initial_flow is None:
            initial_flow = flow
        if not np.isfinite(total):
            raise AttackDiverged(f"non-finite loss at step {step}", tr)
        if callback is not None:
            callback(step, tr)
        if last:
            break
        grads["theta"] = grads.pop("w")
        for g in cfg.optimize:
            vel[g] = MOMENTUM * vel[g] + grads[g]
            if g == "theta":
                fld.w = fld.w - lr[g] * vel[g]
            else:
                setattr(fld, g, getattr(fld, g) - lr[g] * vel[g])
        log.debug("step %d loss %.5f aee %.5f penalty %.5f", step, total, a, p)
    return AttackResult(tr["loss"], tr["aee_target"], tr["penalty"], tr["aee_gt"], fld,
                        flow, initial_flow, (I_t, I_t1))


def evaluate_transfer(scene: ScenePair, field_optimized, victim_b: EstimatorConfig, target="zero_flow",
                      params: RenderParams | None = None) -> float:
    """AEE to target of victim B on the frames rendered with an already optimized field."""
    params = params or RenderParams.for_scene(scene)
    I_t, I_t1, _ = render.render_pair(scene, field_optimized, params)
    tgt = AttackConfig(target=target).target_flow(scene.shape)
    return aee(flow_forward(I_t, I_t1, victim_b).flow, tgt)
