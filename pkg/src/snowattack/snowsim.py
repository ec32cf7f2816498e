"""Snowflake state, procedural templates, snowfield initialization and snow ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry
from .render import RenderParams, init_transparency, logit
from .scenefmt import ScenePair


@dataclass(frozen=True)
class FlakeTemplate:
    mask: np.ndarray
    id: int

    @property
    def resolution(self) -> int:
        return self.mask.shape[0]


@dataclass(frozen=True)
class SnowDirection:
    """Fall direction as down:right weights in the frame-t image plane."""

    down: float = 5.0
    right: float = 2.0
    jitter: float = 0.1

    def __post_init__(self):
        if self.down <= 0:
            raise ValueError("down component must be positive")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")


@dataclass
class Snowflake:
    X: np.ndarray
    m: np.ndarray
    delta_t: np.ndarray
    delta_t1: np.ndarray
    template_id: int
    rotation: float
    world_size: float
    w: float
    d_t: float
    d_t1: float


@dataclass
class SnowField:
    """All flakes of a scene, stored column-wise.

    ``d_t``/``d_t1`` are the camera depths of the un-offset positions ``X`` and
    ``X + motion``; they stay fixed while the offsets are optimized.
    """

    X: np.ndarray
    motion: np.ndarray
    delta_t: np.ndarray
    delta_t1: np.ndarray
    template_id: np.ndarray
    rotation: np.ndarray
    world_size: np.ndarray
    w: np.ndarray
    d_t: np.ndarray
    d_t1: np.ndarray
    templates: list = field(default_factory=list)
    seed: int = 0
    direction: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))

    def __len__(self):
        return len(self.X)

    @property
    def theta(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.w))

    @property
    def flakes(self) -> list[Snowflake]:
        return [
            Snowflake(self.X[i], self.motion[i], self.delta_t[i], self.delta_t1[i],
                      int(self.template_id[i]), float(self.rotation[i]),
                      float(self.world_size[i]), float(self.w[i]),
                      float(self.d_t[i]), float(self.d_t1[i]))
            for i in range(len(self))
        ]

    def copy(self) -> "SnowField":
        arrays = {k: getattr(self, k).copy() for k in _ARRAY_FIELDS}
        return replace(self, **arrays)

    def subset(self, idx) -> "SnowField":
        arrays = {k: getattr(self, k)[idx].copy() for k in _ARRAY_FIELDS}
        return replace(self, **arrays)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k).tolist() for k in _ARRAY_FIELDS}
        out["seed"] = self.seed
        out["direction"] = self.direction.tolist()
        out["templates"] = [t.mask.tolist() for t in self.templates]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SnowField":
        arrays = {k: np.asarray(data[k], dtype=np.int64 if k == "template_id" else np.float64)
                  for k in _ARRAY_FIELDS}
        for k in ("X", "motion", "delta_t", "delta_t1"):
            arrays[k] = arrays[k].reshape(-1, 3)
        templates = [FlakeTemplate(np.asarray(m, dtype=np.float64), i)
                     for i, m in enumerate(data["templates"])]
        return cls(**arrays, templates=templates, seed=int(data["seed"]),
                   direction=np.asarray(data["direction"], dtype=np.float64))


_ARRAY_FIELDS = ("X", "motion", "delta_t", "delta_t1", "template_id", "rotation",
                 "world_size", "w", "d_t", "d_t1")


# -- templates ---------------------------------------------------------------

def _gaussian_mask(res, sigma):
    c = np.linspace(-1.0, 1.0, res)
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return np.exp(-(xx ** 2 + yy ** 2) / (2 * sigma ** 2))


def _star_mask(res, k, inner, phase, edge=0.08):
    c = np.linspace(-1.0, 1.0, res)
    yy, xx = np.meshgrid(c, c, indexing="ij")
    rho = np.hypot(xx, yy)
    phi = np.arctan2(yy, xx) - phase
    # arm profile: sharp peaks at the k arm directions
    profile = (0.5 + 0.5 * np.cos(k * phi)) ** 3
    radius = inner + (0.9 - inner) * profile
    return 1.0 / (1.0 + np.exp((rho - radius) / (edge / 2)))


def make_templates(seed: int, count: int = 12, resolution: int = 31) -> list[FlakeTemplate]:
    """Procedural flakes: even ids are Gaussian blobs, odd ids 5/6/7-armed stars."""
    if count < 1:
        raise ValueError("need at least one template")
    if resolution < 8:
        raise ValueError("template resolution must be >= 8")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        if i % 2 == 0:
            mask = _gaussian_mask(resolution, rng.uniform(0.25, 0.45))
        else:
            k = int(rng.choice([5, 6, 7]))
            mask = _star_mask(resolution, k, rng.uniform(0.25, 0.4), rng.uniform(0, 2 * np.pi))
        mask = np.clip(mask / mask.max(), 0.0, 1.0)
        out.append(FlakeTemplate(mask, i))
    return out


# -- initialization ----------------------------------------------------------

def fall_direction(scene: ScenePair, direction: SnowDirection) -> np.ndarray:
    """Unit world vector for "down:right" in the frame-t image plane."""
    cam = np.array([direction.right, direction.down, 0.0])
    cam /= np.linalg.norm(cam)
    return scene.pose_t.R.T @ cam


def default_fall_speed(scene: ScenePair, px: float = 10.0) -> float:
    return px * float(np.median(scene.depth_t)) / scene.pose_t.fx


def default_flake_size(scene: ScenePair, px: float = 2.5) -> float:
    return px * float(np.median(scene.depth_t)) / scene.pose_t.fx


def init_snowfield(scene: ScenePair, n: int, direction: SnowDirection | None = None,
                   fall_speed: float | None = None, rng=None, *, seed: int = 0,
                   flake_size: float | None = None, params: RenderParams | None = None,
                   templates: list[FlakeTemplate] | None = None, margin: float = 0.0,
                   depth_range=None) -> SnowField:
    direction = direction or SnowDirection()
    rng = rng if rng is not None else np.random.default_rng(seed)
    params = params or RenderParams.for_scene(scene)
    templates = templates or make_templates(seed)
    fall_speed = default_fall_speed(scene) if fall_speed is None else fall_speed
    flake_size = default_flake_size(scene) if flake_size is None else flake_size
    unit = fall_direction(scene, direction)
    mean = fall_speed * unit

    def draw_motion(r, k):
        return mean * (1.0 + r.normal(0.0, direction.jitter, (k, 3))) if direction.jitter else np.tile(mean, (k, 1))

    X, motion = geometry.sample_with_motion(rng, n, scene, draw_motion, mean * 1.5,
                                            margin=margin, depth_range=depth_range)
    template_id = rng.integers(0, len(templates), n)
    rotation = rng.uniform(0.0, 2 * np.pi, n)
    world_size = flake_size * rng.uniform(0.6, 1.4, n)
    d_t = geometry.to_camera(scene.pose_t, X)[:, 2]
    d_t1 = geometry.to_camera(scene.pose_t1, X + motion)[:, 2]
    d_ref = np.where(d_t > geometry.Z_EPS, d_t, np.abs(d_t1))
    w = logit(init_transparency(d_ref, params))
    return SnowField(X=X, motion=motion, delta_t=np.zeros((n, 3)), delta_t1=np.zeros((n, 3)),
                     template_id=template_id, rotation=rotation, world_size=world_size, w=w,
                     d_t=d_t, d_t1=d_t1, templates=templates, seed=seed, direction=unit)


# -- ground truth ------------------------------------------------------------

GT_ALPHA_THRESHOLD = 0.5


def flake_displacements(scene: ScenePair, field: SnowField) -> tuple[np.ndarray, np.ndarray]:
    """Image displacement of each flake's offset center, and a validity mask."""
    from .render import frame_positions

    P_t, P_t1 = frame_positions(field)
    uvd_t = geometry.project_camera(scene.pose_t.K, geometry.to_camera(scene.pose_t, P_t))
    A = geometry.relative_transform(scene.pose_t, scene.pose_t1)
    Xc1 = geometry.apply_transform(A, geometry.to_camera(scene.pose_t, P_t1))
    uvd_t1 = geometry.project_camera(scene.pose_t1.K, Xc1)
    ok = (uvd_t[:, 2] > geometry.Z_EPS) & (uvd_t1[:, 2] > geometry.Z_EPS)
    return uvd_t1[:, :2] - uvd_t[:, :2], ok


def snow_ground_truth_flow(scene: ScenePair, field: SnowField,
                           params: RenderParams | None = None) -> np.ndarray:
    """Background flow, overwritten where a flake dominates the frame-t pixel.

    A flake dominates when its effective alpha exceeds 0.5; nearer flakes win.
    """
    from .render import render_frame_t

    if scene.gt_flow is None:
        raise ValueError("scene has no background ground-truth flow")
    flow = np.array(scene.gt_flow, dtype=np.float64)
    if len(field) == 0:
        return flow
    params = params or RenderParams.for_scene(scene)
    disp, ok = flake_displacements(scene, field)
    _, tape = render_frame_t(scene, field, params)
    h, w = scene.shape
    for k, (y0, x0, a) in tape.windows():
        if not ok[k]:
            continue
        ys, xs = np.nonzero(a > GT_ALPHA_THRESHOLD)
        ys, xs = ys + y0, xs + x0
        inside = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        flow[ys[inside], xs[inside]] = disp[k]
    return flow
