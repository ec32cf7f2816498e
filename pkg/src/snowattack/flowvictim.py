"""Differentiable classical optical flow: unrolled Horn-Schunck and Lucas-Kanade.

Both estimators run coarse to fine on a 2x2-average pyramid. At every level
the second image is warped towards the first with the current flow (Keys
cubic interpolation, replicate border), the brightness-constancy constraint is
linearized, and the increment is found by a fixed number of Jacobi sweeps
(Horn-Schunck) or by a per-pixel windowed 2x2 solve (Lucas-Kanade). Every step
is recorded so :func:`flow_backward` can return exact image gradients.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

LUMA = np.array([0.299, 0.587, 0.114])

_DIFF = np.array([-0.5, 0.0, 0.5])
_SMOOTH = np.array([1.0, 2.0, 1.0])


class DegenerateInputWarning(RuntimeWarning):
    """The images carry no gradient information at some pyramid level."""


@dataclass(frozen=True)
class EstimatorConfig:
    kind: str = "horn_schunck"
    hs_lambda: float = 0.05
    hs_iterations: int = 40
    lk_window: int = 7
    pyramid_levels: int = 3
    warps: int = 1
    lk_eps: float = 1e-4

    def __post_init__(self):
        if self.kind not in ("horn_schunck", "lucas_kanade"):
            raise ValueError(f"unknown estimator kind {self.kind!r}")
        if self.hs_lambda <= 0:
            raise ValueError("hs_lambda must be positive")
        if self.hs_iterations < 1:
            raise ValueError("hs_iterations must be >= 1")
        if self.lk_window < 3 or self.lk_window % 2 == 0:
            raise ValueError("lk_window must be odd and >= 3")
        if self.pyramid_levels < 1 or self.warps < 1:
            raise ValueError("pyramid_levels and warps must be >= 1")
        if self.lk_eps <= 0:
            raise ValueError("lk_eps must be positive")


# -- linear operators and their adjoints -------------------------------------
# All filters use replicate padding along the last two axes.

def _corr(x, ker, axis):
    return correlate1d(x, ker, axis=axis, mode="nearest")


def _corr_T(g, ker, axis):
    p = len(ker) // 2
    pad = [(0, 0)] * g.ndim
    pad[axis] = (p, p)
    y = correlate1d(np.pad(g, pad), ker[::-1], axis=axis, mode="constant")
    y = np.moveaxis(y, axis, 0)
    n = y.shape[0] - 2 * p
    out = y[p:p + n].copy()
    out[0] += y[:p].sum(axis=0)
    out[-1] += y[p + n:].sum(axis=0)
    return np.moveaxis(out, 0, axis)


def _dx(x):
    return _corr(x, _DIFF, -1)


def _dx_T(g):
    return _corr_T(g, _DIFF, -1)


def _dy(x):
    return _corr(x, _DIFF, -2)


def _dy_T(g):
    return _corr_T(g, _DIFF, -2)


def _avg(x):
    """Horn-Schunck neighbourhood mean: weights 1/6 on edges, 1/12 on corners."""
    return (_corr(_corr(x, _SMOOTH, -1), _SMOOTH, -2) - 4.0 * x) / 12.0


def _avg_T(g):
    # [1, 2, 1] with replicate padding has a symmetric matrix, so _avg is self-adjoint
    return _avg(g)


def _box(x, n):
    k = np.full(n, 1.0 / n)
    return _corr(_corr(x, k, -1), k, -2)


def _box_T(g, n):
    k = np.full(n, 1.0 / n)
    return _corr_T(_corr_T(g, k, -2), k, -1)


def _down(x):
    h, w = x.shape
    x = np.pad(x, ((0, h % 2), (0, w % 2)), mode="edge")
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _down_T(g, shape):
    h, w = shape
    H, W = h + h % 2, w + w % 2
    out = np.zeros((H, W))
    q = 0.25 * g
    for dy in (0, 1):
        for dx in (0, 1):
            out[dy::2, dx::2] += q
    if h % 2:
        out[h - 1, :] += out[h, :]
    if w % 2:
        out[:, w - 1] += out[:, w]
    return out[:h, :w]


def _up(f, shape):
    """Nearest-neighbour 2x upsampling of a flow component, doubling its values."""
    h, w = shape
    return 2.0 * np.repeat(np.repeat(f, 2, axis=0), 2, axis=1)[:h, :w]


def _up_T(g, shape_coarse):
    hc, wc = shape_coarse
    G = np.zeros((2 * hc, 2 * wc))
    G[:g.shape[0], :g.shape[1]] = g
    return 2.0 * (G[0::2, 0::2] + G[1::2, 0::2] + G[0::2, 1::2] + G[1::2, 1::2])


def _keys(t):
    t2, t3 = t * t, t * t * t
    w = np.stack([(-t3 + 2 * t2 - t) / 2, (3 * t3 - 5 * t2 + 2) / 2,
                  (-3 * t3 + 4 * t2 + t) / 2, (t3 - t2) / 2])
    dw = np.stack([(-3 * t2 + 4 * t - 1) / 2, (9 * t2 - 10 * t) / 2,
                   (-9 * t2 + 8 * t + 1) / 2, (3 * t2 - 2 * t) / 2])
    return w, dw


@dataclass
class _Warp:
    idx: list       # 16 flat index arrays
    wts: list       # 16 weight arrays
    value: np.ndarray
    d_u: np.ndarray
    d_v: np.ndarray


def _warp(img, u, v):
    """Sample ``img`` at ``(x + u, y + v)`` with Keys cubic interpolation."""
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    X, Y = xx + u, yy + v
    x0, y0 = np.floor(X), np.floor(Y)
    wx, dwx = _keys(X - x0)
    wy, dwy = _keys(Y - y0)
    x0, y0 = x0.astype(np.intp), y0.astype(np.intp)
    flat = img.ravel()
    value = np.zeros((h, w))
    d_u = np.zeros((h, w))
    d_v = np.zeros((h, w))
    idx, wts = [], []
    for i in range(4):
        ry = np.clip(y0 + i - 1, 0, h - 1)
        for j in range(4):
            rx = np.clip(x0 + j - 1, 0, w - 1)
            k = ry * w + rx
            s = flat[k]
            wt = wy[i] * wx[j]
            value += wt * s
            d_u += wy[i] * dwx[j] * s
            d_v += dwy[i] * wx[j] * s
            idx.append(k.ravel())
            wts.append(wt.ravel())
    return _Warp(idx, wts, value, d_u, d_v)


def _warp_T(wp: _Warp, g, shape):
    h, w = shape
    out = np.zeros(h * w)
    gf = g.ravel()
    for k, wt in zip(wp.idx, wp.wts):
        out += np.bincount(k, weights=wt * gf, minlength=h * w)
    return out.reshape(h, w)


def to_gray(img):
    return np.asarray(img, dtype=np.float64) @ LUMA


# -- forward -----------------------------------------------------------------

@dataclass
class _Step:
    """One warp of one pyramid level."""

    u0: np.ndarray
    v0: np.ndarray
    warp: _Warp
    Ix: np.ndarray
    Iy: np.ndarray
    It: np.ndarray
    iterates: list = field(default_factory=list)   # HS: (neighbour mean, q) per sweep
    lk: dict | None = None


@dataclass
class FlowTape:
    cfg: EstimatorConfig
    shapes: list
    pyr1: list
    pyr2: list
    levels: dict              # level -> list[_Step]
    flow: np.ndarray


def _data_terms(I1, I2, u0, v0):
    wp = _warp(I2, u0, v0)
    Ix = 0.5 * (_dx(I1) + _dx(wp.value))
    Iy = 0.5 * (_dy(I1) + _dy(wp.value))
    It = wp.value - I1
    return wp, Ix, Iy, It


def _hs_sweeps(step: _Step, lam, iters):
    G = np.stack([step.Ix, step.Iy])
    F0 = np.stack([step.u0, step.v0])
    den = lam + step.Ix ** 2 + step.Iy ** 2
    F = F0
    for _ in range(iters):
        Fb = _avg(F)
        q = (np.sum(G * (Fb - F0), axis=0) + step.It) / den
        step.iterates.append((Fb, q))
        F = Fb - G * q
    return F[0], F[1]


def _lk_solve(step: _Step, window, eps):
    Ix, Iy, It = step.Ix, step.Iy, step.It
    a, b, d, p, q = _box(np.stack([Ix * Ix, Ix * Iy, Iy * Iy, Ix * It, Iy * It]), window)
    a, d = a + eps, d + eps
    det = a * d - b * b
    nu, nv = d * p - b * q, a * q - b * p
    step.lk = dict(window=window, a=a, b=b, d=d, p=p, q=q, det=det, nu=nu, nv=nv)
    return step.u0 - nu / det, step.v0 - nv / det


def _pyramid(img, levels):
    pyr = [img]
    for _ in range(levels - 1):
        if min(pyr[-1].shape) < 4:
            break
        pyr.append(_down(pyr[-1]))
    return pyr


def flow_forward(I1, I2, cfg: EstimatorConfig) -> FlowTape:
    I1 = np.asarray(I1, dtype=np.float64)
    I2 = np.asarray(I2, dtype=np.float64)
    if I1.shape != I2.shape:
        raise ValueError(f"image shapes differ: {I1.shape} vs {I2.shape}")
    g1 = to_gray(I1) if I1.ndim == 3 else I1
    g2 = to_gray(I2) if I2.ndim == 3 else I2
    pyr1 = _pyramid(g1, cfg.pyramid_levels)
    pyr2 = _pyramid(g2, cfg.pyramid_levels)
    shapes = [p.shape for p in pyr1]
    top = len(pyr1) - 1
    u = np.zeros(shapes[top])
    v = np.zeros(shapes[top])
    levels = {}
    for lv in range(top, -1, -1):
        if lv < top:
            u, v = _up(u, shapes[lv]), _up(v, shapes[lv])
        steps = []
        for _ in range(cfg.warps):
            wp, Ix, Iy, It = _data_terms(pyr1[lv], pyr2[lv], u, v)
            if np.max(Ix * Ix + Iy * Iy) < 1e-14:
                warnings.warn(f"no image gradient at pyramid level {lv}; data term vanishes",
                              DegenerateInputWarning, stacklevel=2)
            step = _Step(u, v, wp, Ix, Iy, It)
            if cfg.kind == "horn_schunck":
                u, v = _hs_sweeps(step, cfg.hs_lambda, cfg.hs_iterations)
            else:
                u, v = _lk_solve(step, cfg.lk_window, cfg.lk_eps)
            steps.append(step)
        levels[lv] = steps
    return FlowTape(cfg, shapes, pyr1, pyr2, levels, np.stack([u, v], axis=-1))


def estimate_flow(I1, I2, cfg: EstimatorConfig | None = None) -> np.ndarray:
    return flow_forward(I1, I2, cfg or EstimatorConfig()).flow


# -- backward ----------------------------------------------------------------

def _hs_step_T(step: _Step, lam, gu, gv):
    """Reverse the Jacobi sweeps. Returns grads for u0, v0, Ix, Iy, It."""
    G = np.stack([step.Ix, step.Iy])
    F0 = np.stack([step.u0, step.v0])
    den = lam + step.Ix ** 2 + step.Iy ** 2
    gF = np.stack([gu, gv])
    gG = np.zeros_like(G)
    gIt = np.zeros_like(den)
    gF0 = np.zeros_like(G)
    for Fb, q in reversed(step.iterates):
        gq = -np.sum(G * gF, axis=0)
        gr = gq / den
        gden = -gq * q / den
        gG += -q * gF + 2 * G * gden + gr * (Fb - F0)
        gIt += gr
        gF0 -= gr * G
        gF = _avg_T(gF + gr * G)
    # the first iterate is F0 itself
    gF0 += gF
    return gF0[0], gF0[1], gG[0], gG[1], gIt


def _lk_step_T(step: _Step, gu, gv):
    s = step.lk
    det = s["det"]
    g_nu = -gu / det
    g_nv = -gv / det
    g_det = (gu * s["nu"] + gv * s["nv"]) / (det * det)
    ga = g_nv * s["q"] + g_det * s["d"]
    gd = g_nu * s["p"] + g_det * s["a"]
    gb = -g_nu * s["q"] - g_nv * s["p"] - 2 * s["b"] * g_det
    gp = g_nu * s["d"] - g_nv * s["b"]
    gq = -g_nu * s["b"] + g_nv * s["a"]
    ga, gb, gd, gp, gq = _box_T(np.stack([ga, gb, gd, gp, gq]), s["window"])
    Ix, Iy, It = step.Ix, step.Iy, step.It
    gIx = 2 * Ix * ga + Iy * gb + It * gp
    gIy = Ix * gb + 2 * Iy * gd + It * gq
    gIt = Ix * gp + Iy * gq
    return gu, gv, gIx, gIy, gIt


def flow_backward(tape: FlowTape, grad_flow) -> tuple[np.ndarray, np.ndarray]:
    """Image-space gradients (gray, per pyramid base) for an upstream flow gradient."""
    grad_flow = np.asarray(grad_flow, dtype=np.float64)
    if grad_flow.shape != tape.flow.shape:
        raise ValueError(f"flow gradient shape {grad_flow.shape} != {tape.flow.shape}")
    cfg = tape.cfg
    g1 = [np.zeros(s) for s in tape.shapes]
    g2 = [np.zeros(s) for s in tape.shapes]
    gu, gv = grad_flow[..., 0].copy(), grad_flow[..., 1].copy()
    top = len(tape.shapes) - 1
    for lv in range(0, top + 1):
        for step in reversed(tape.levels[lv]):
            if cfg.kind == "horn_schunck":
                gu, gv, gIx, gIy, gIt = _hs_step_T(step, cfg.hs_lambda, gu, gv)
            else:
                gu, gv, gIx, gIy, gIt = _lk_step_T(step, gu, gv)
            gx = 0.5 * _dx_T(gIx) + 0.5 * _dy_T(gIy)
            g1[lv] += gx - gIt
            gw = gx + gIt
            g2[lv] += _warp_T(step.warp, gw, tape.shapes[lv])
            gu = gu + gw * step.warp.d_u
            gv = gv + gw * step.warp.d_v
        if lv < top:
            gu, gv = _up_T(gu, tape.shapes[lv + 1]), _up_T(gv, tape.shapes[lv + 1])
    for lv in range(top, 0, -1):
        g1[lv - 1] += _down_T(g1[lv], tape.shapes[lv - 1])
        g2[lv - 1] += _down_T(g2[lv], tape.shapes[lv - 1])
    return g1[0], g2[0]


def flow_input_gradient(I1, I2, cfg: EstimatorConfig, grad_flow):
    """Gradients of ``sum(grad_flow * flow)`` w.r.t. both RGB input images."""
    tape = flow_forward(I1, I2, cfg)
    g1, g2 = flow_backward(tape, grad_flow)
    return rgb_grad(g1, np.ndim(I1)), rgb_grad(g2, np.ndim(I2))


def rgb_grad(g_gray, ndim=3):
    return g_gray[..., None] * LUMA if ndim == 3 else g_gray
