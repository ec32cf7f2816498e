"""Pinhole projection, the frame-to-frame camera transform and visible-point sampling.

Relative transforms are plain ``(3, 4)`` arrays ``[R | t]`` mapping camera-t
coordinates to camera-(t+1) coordinates.
"""

from __future__ import annotations

import numpy as np

from .scenefmt import CameraPose, ScenePair

Z_EPS = 1e-4
NEAR_CLAMP = (0.5, 80.0)


class BehindCameraError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


def to_camera(pose: CameraPose, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return X @ pose.R.T + pose.t


def project_camera(K: np.ndarray, Xc) -> np.ndarray:
    """Project camera-space points; returns ``(..., 3)`` of ``(u, v, d)``.

    No depth check: callers mask points with ``d <= Z_EPS``.
    """
    Xc = np.asarray(Xc, dtype=np.float64)
    z = Xc[..., 2]
    zs = np.where(np.abs(z) > Z_EPS, z, Z_EPS)
    x, y = Xc[..., 0] / zs, Xc[..., 1] / zs
    u = K[0, 0] * x + K[0, 1] * y + K[0, 2]
    v = K[1, 1] * y + K[1, 2]
    return np.stack([u, v, z], axis=-1)


def projection_jacobian(K: np.ndarray, Xc) -> np.ndarray:
    """``d(u, v, d) / d(camera xyz)``, shape ``(..., 3, 3)``."""
    Xc = np.asarray(Xc, dtype=np.float64)
    x, y, z = Xc[..., 0], Xc[..., 1], Xc[..., 2]
    iz = 1.0 / z
    J = np.zeros(Xc.shape[:-1] + (3, 3))
    J[..., 0, 0] = K[0, 0] * iz
    J[..., 0, 1] = K[0, 1] * iz
    J[..., 0, 2] = -(K[0, 0] * x + K[0, 1] * y) * iz * iz
    J[..., 1, 1] = K[1, 1] * iz
    J[..., 1, 2] = -K[1, 1] * y * iz * iz
    J[..., 2, 2] = 1.0
    return J


def project(pose: CameraPose, X):
    """World point(s) to ``(u, v, d)``; raises if any point is at or behind the camera."""
    uvd = project_camera(pose.K, to_camera(pose, X))
    if np.any(uvd[..., 2] <= Z_EPS):
        raise BehindCameraError("point at or behind the camera plane")
    return uvd


def unproject(pose: CameraPose, u, v, d) -> np.ndarray:
    u, v, d = (np.asarray(a, dtype=np.float64) for a in (u, v, d))
    if np.any(d <= 0):
        raise ValueError("depth must be positive")
    K = pose.K
    y = (v - K[1, 2]) / K[1, 1]
    x = (u - K[0, 2] - K[0, 1] * y) / K[0, 0]
    Xc = np.stack([x * d, y * d, d], axis=-1)
    return (Xc - pose.t) @ pose.R


def relative_transform(pose_t: CameraPose, pose_t1: CameraPose) -> np.ndarray:
    R = pose_t1.R @ pose_t.R.T
    t = pose_t1.t - R @ pose_t.t
    return np.hstack([R, t[:, None]])


def apply_transform(A: np.ndarray, X) -> np.ndarray:
    return np.asarray(X, dtype=np.float64) @ A[:, :3].T + A[:, 3]


def compose(A2: np.ndarray, A1: np.ndarray) -> np.ndarray:
    """Transform equivalent to applying ``A1`` then ``A2``."""
    R = A2[:, :3] @ A1[:, :3]
    t = A2[:, :3] @ A1[:, 3] + A2[:, 3]
    return np.hstack([R, t[:, None]])


def default_depth_range(scene: ScenePair) -> tuple[float, float]:
    lo, hi = NEAR_CLAMP
    far = float(np.clip(max(scene.depth_t.max(), scene.depth_t1.max()), lo, hi))
    return lo, far


def in_frame(uvd: np.ndarray, shape, margin: float = 0.0) -> np.ndarray:
    h, w = shape
    u, v, d = uvd[..., 0], uvd[..., 1], uvd[..., 2]
    return ((d > Z_EPS) & (u >= -0.5 - margin) & (u <= w - 0.5 + margin)
            & (v >= -0.5 - margin) & (v <= h - 0.5 + margin))


def visible_either(scene: ScenePair, X, motion, margin: float = 0.0) -> np.ndarray:
    """Visibility disjunction: inside frame t, or inside frame t+1 after the motion."""
    X = np.asarray(X, dtype=np.float64)
    uvd_t = project_camera(scene.pose_t.K, to_camera(scene.pose_t, X))
    uvd_t1 = project_camera(scene.pose_t1.K, to_camera(scene.pose_t1, X + motion))
    return in_frame(uvd_t, scene.shape, margin) | in_frame(uvd_t1, scene.shape, margin)


def _frame_t_slack(scene, motion, near, far, margin):
    """How far outside frame t (px) a point visible only in frame t+1 can project."""
    h, w = scene.shape
    cu = np.array([-0.5 - margin, w - 0.5 + margin])
    cv = np.array([-0.5 - margin, h - 0.5 + margin])
    uu, vv, dd = np.meshgrid(cu, cv, [near, far], indexing="ij")
    X = unproject(scene.pose_t1, uu.ravel(), vv.ravel(), dd.ravel()) - motion
    uvd = project_camera(scene.pose_t.K, to_camera(scene.pose_t, X))
    ok = uvd[:, 2] > Z_EPS
    if not np.any(ok):
        return 0.0
    uvd = uvd[ok]
    over = np.concatenate([-0.5 - uvd[:, 0], uvd[:, 0] - (w - 0.5),
                           -0.5 - uvd[:, 1], uvd[:, 1] - (h - 0.5), [0.0]])
    return float(min(over.max(), 4 * max(h, w)))


def sample_visible_points(rng: np.random.Generator, n: int, scene: ScenePair, motion,
                          margin: float = 0.0, depth_range=None,
                          max_tries: int | None = None) -> np.ndarray:
    """Uniform image position x uniform depth, kept when visible in frame t or t+1.

    Candidates come from frame t's image rectangle, widened by the amount the
    motion can carry a frame-(t+1) point out of it, then filtered by the
    visibility disjunction. Scene depth is not consulted for occlusion.
    """
    motion = np.asarray(motion, dtype=np.float64)
    X, _ = sample_with_motion(rng, n, scene, lambda r, k: np.broadcast_to(motion, (k, 3)),
                              motion, margin, depth_range, max_tries)
    return X


def sample_with_motion(rng, n, scene, draw_motion, reach, margin=0.0, depth_range=None,
                       max_tries=None):
    """Like :func:`sample_visible_points` with a per-candidate motion.

    ``draw_motion(rng, k)`` returns ``(k, 3)`` motions; ``reach`` is a motion
    vector bounding how far candidates may lie outside frame t.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return np.zeros((0, 3)), np.zeros((0, 3))
    near, far = depth_range or default_depth_range(scene)
    slack = _frame_t_slack(scene, np.asarray(reach, dtype=np.float64), near, far, margin) + margin
    h, w = scene.shape
    budget = max_tries if max_tries is not None else 1000 * (n + 10)
    pts, mots, kept, drawn = [], [], 0, 0
    batch = max(64, 2 * n)
    while kept < n:
        if drawn >= budget:
            raise SamplingError(f"only {kept} of {n} visible points after {drawn} draws")
        u = rng.uniform(-0.5 - slack, w - 0.5 + slack, batch)
        v = rng.uniform(-0.5 - slack, h - 0.5 + slack, batch)
        d = rng.uniform(near, far, batch)
        m = np.asarray(draw_motion(rng, batch), dtype=np.float64)
        drawn += batch
        X = unproject(scene.pose_t, u, v, d)
        ok = visible_either(scene, X, m, margin)
        pts.append(X[ok])
        mots.append(m[ok])
        kept += int(ok.sum())
    return np.concatenate(pts)[:n], np.concatenate(mots)[:n]
