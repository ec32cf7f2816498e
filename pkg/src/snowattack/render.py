"""Differentiable snow-to-scene renderer.

Each flake becomes a square alpha patch: its rotated template, resampled at
the flake's current projected radius, blurred by a depth-dependent disk PSF,
multiplied by transparency and by a soft depth-test visibility. Patches are
splatted bilinearly at their subpixel anchor and "over"-composited back to
front. :func:`backward` replays the tape in reverse to give exact gradients
with respect to the offsets ``delta_t``, ``delta_t1`` and the transparency
logits ``w``.

Discrete choices (patch size, PSF radius) are taken from the flake's cached
depths and do not move during optimization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .scenefmt import ScenePair

_BUCKETS = (8, 12, 16, 24, 32, 48, 64, 96, 128)
_TEMPLATE_PAD = 4
UNSCALED_RADIUS_PX = 3.0


@dataclass
class RenderParams:
    focus_depth: float = 5.0
    aperture: float = 1.0
    visibility_softness: float = 0.25
    flake_color: tuple = (1.0, 1.0, 1.0)
    transparency_near: float = 0.9
    transparency_falloff: float = 20.0

    def __post_init__(self):
        if self.visibility_softness <= 0:
            raise ValueError("visibility_softness must be positive")
        if self.aperture < 0:
            raise ValueError("aperture must be non-negative")
        if not 0 < self.transparency_near <= 1:
            raise ValueError("transparency_near must lie in (0, 1]")
        if self.focus_depth <= 0 or self.transparency_falloff <= 0:
            raise ValueError("focus_depth and transparency_falloff must be positive")

    @classmethod
    def for_scene(cls, scene: ScenePair, **overrides) -> "RenderParams":
        """Defaults scaled to the scene: focus at the median depth, at most
        2 px of blur at the near plane, opacity falling off over 4 median depths."""
        focus = float(np.median(scene.depth_t))
        near, _ = geometry.default_depth_range(scene)
        spread = abs(1.0 / near - 1.0 / focus)
        kw = dict(focus_depth=focus,
                  aperture=2.0 / spread if spread > 0 else 0.0,
                  transparency_falloff=4.0 * focus)
        kw.update(overrides)
        return cls(**kw)


@dataclass(frozen=True)
class Stages:
    """Switches for the individual rendering effects (all on for real renders)."""

    scaling: bool = True
    transparency: bool = True
    blur: bool = True
    occlusion: bool = True


FULL = Stages()


# -- scalar building blocks --------------------------------------------------

def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def flake_scale(world_size, fx, d):
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("depth must be positive")
    return fx * np.asarray(world_size) / d


def init_transparency(d, params: RenderParams):
    theta = params.transparency_near * np.exp(-np.asarray(d, dtype=np.float64) / params.transparency_falloff)
    return np.clip(theta, 0.02, params.transparency_near)


def psf_radius(d, params: RenderParams):
    """Blur radius in px, rounded to the 0.5 px grid."""
    r = params.aperture * np.abs(1.0 / np.asarray(d, dtype=np.float64) - 1.0 / params.focus_depth)
    return np.round(2.0 * r) / 2.0


def disk_kernel(radius: float) -> np.ndarray:
    """Normalized disk with a one-pixel linear rim; uniform inside ``radius - 0.5``."""
    k = int(np.ceil(radius))
    if k == 0:
        return np.ones((1, 1))
    o = np.arange(-k, k + 1)
    dist = np.hypot(o[:, None], o[None, :])
    ker = np.clip(radius + 0.5 - dist, 0.0, 1.0)
    return ker / ker.sum()


def _convolve_full(x, ker):
    """Full 2-D convolution over the last two axes (kernel is symmetric)."""
    kh, kw = ker.shape
    h, w = x.shape[-2:]
    out = np.zeros(x.shape[:-2] + (h + kh - 1, w + kw - 1))
    for i in range(kh):
        for j in range(kw):
            if ker[i, j]:
                out[..., i:i + h, j:j + w] += ker[i, j] * x
    return out


def _convolve_same(x, ker):
    kh, kw = ker.shape
    ph, pw = kh // 2, kw // 2
    full = _convolve_full(x, ker)
    return full[..., ph:ph + x.shape[-2], pw:pw + x.shape[-1]]


def psf_blur(mask: np.ndarray, d: float, params: RenderParams) -> np.ndarray:
    """Blur a patch with the PSF for depth ``d``; the result grows by the kernel
    radius on every side so no mass is lost."""
    return _convolve_full(np.asarray(mask, dtype=np.float64), disk_kernel(float(psf_radius(d, params))))


def bilinear_clamped(img: np.ndarray, x, y):
    """Bilinear sample with edge clamping; returns value and its x/y partials."""
    h, w = img.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx, ty = xc - x0, yc - y0
    a, b = img[y0, x0], img[y0, x1]
    c, d = img[y1, x0], img[y1, x1]
    top = a + tx * (b - a)
    bot = c + tx * (d - c)
    val = top + ty * (bot - top)
    dx = ((b - a) * (1 - ty) + (d - c) * ty) * ((x >= 0) & (x <= w - 1))
    dy = (bot - top) * ((y >= 0) & (y <= h - 1))
    return val, dx, dy


def visibility(depthmap: np.ndarray, u, v, d_flake, eps: float):
    D, _, _ = bilinear_clamped(depthmap, u, v)
    return sigmoid((D - np.asarray(d_flake)) / eps)


# -- template resampling -----------------------------------------------------

def _bspline_weights(t):
    t2, t3 = t * t, t * t * t
    s = 1.0 - t
    w = np.stack([s * s * s / 6.0, (3 * t3 - 6 * t2 + 4) / 6.0,
                  (-3 * t3 + 3 * t2 + 3 * t + 1) / 6.0, t3 / 6.0], axis=-1)
    dw = np.stack([-0.5 * s * s, 1.5 * t2 - 2 * t, -1.5 * t2 + t + 0.5, 0.5 * t2], axis=-1)
    return w, dw


def _pad_templates(templates) -> np.ndarray:
    masks = np.stack([np.asarray(getattr(t, "mask", t), dtype=np.float64) for t in templates])
    return np.pad(masks, ((0, 0), (_TEMPLATE_PAD, _TEMPLATE_PAD), (_TEMPLATE_PAD, _TEMPLATE_PAD)))


def sample_templates(coef: np.ndarray, tid, ty, tx):
    """Cubic B-spline reconstruction of padded template masks at ``(ty, tx)``.

    The masks act as spline coefficients directly, so values stay in [0, 1]
    and the result is twice continuously differentiable in the coordinates.
    Returns value, d/dty, d/dtx.
    """
    res = coef.shape[-1] - 2 * _TEMPLATE_PAD
    ty = np.clip(ty, -2.0, res + 1.0)
    tx = np.clip(tx, -2.0, res + 1.0)
    iy, ix = np.floor(ty), np.floor(tx)
    wy, dwy = _bspline_weights(ty - iy)
    wx, dwx = _bspline_weights(tx - ix)
    taps = np.arange(-1, 3)
    ry = iy.astype(np.intp)[..., None] + taps + _TEMPLATE_PAD
    rx = ix.astype(np.intp)[..., None] + taps + _TEMPLATE_PAD
    tid = np.asarray(tid).reshape(tid.shape + (1,) * (ty.ndim - 1 + 2))
    C = coef[tid, ry[..., :, None], rx[..., None, :]]
    cx = np.einsum("...ij,...j->...i", C, wx)
    cdx = np.einsum("...ij,...j->...i", C, dwx)
    val = np.einsum("...i,...i->...", cx, wy)
    d_ty = np.einsum("...i,...i->...", cx, dwy)
    d_tx = np.einsum("...i,...i->...", cdx, wy)
    return val, d_ty, d_tx


# -- forward -----------------------------------------------------------------

def frame_positions(field):
    """World positions of every flake in frame t and frame t+1."""
    return field.X + field.delta_t, field.X + field.motion + field.delta_t1


def _patch_size(radius, rb):
    need = np.ceil(2.0 * (1.15 * radius + rb)).astype(int) + 3
    idx = np.searchsorted(_BUCKETS, need)
    return np.where(idx < len(_BUCKETS), np.array(_BUCKETS)[np.minimum(idx, len(_BUCKETS) - 1)], need)


@dataclass
class _Bucket:
    idx: np.ndarray          # flake indices
    A: int                   # patch side
    x0: np.ndarray
    y0: np.ndarray
    fx: np.ndarray           # fractional splat offsets
    fy: np.ndarray
    alpha: np.ndarray        # (n, A, A) effective alpha before splatting
    win: np.ndarray          # (n, A+1, A+1) splatted alpha
    theta: np.ndarray
    vis: np.ndarray
    B: np.ndarray            # blurred, scaled template
    dB_dz: np.ndarray
    Dx: np.ndarray
    Dy: np.ndarray
    J: np.ndarray            # (n, 3, 3) d(u, v, z)/d(world position)


@dataclass
class FrameTape:
    shape: tuple
    background: np.ndarray
    color: np.ndarray
    softness: float
    order: list = field(default_factory=list)          # flake ids, back to front
    where: dict = field(default_factory=dict)          # flake id -> (bucket, row)
    buckets: list = field(default_factory=list)
    under: dict = field(default_factory=dict)          # flake id -> covered pixels before blending
    stages: Stages = FULL
    image: np.ndarray | None = None
    n_flakes: int = 0

    def _window(self, k):
        b, r = self.where[k]
        bk = self.buckets[b]
        return int(bk.y0[r]), int(bk.x0[r]), bk.win[r]

    def windows(self):
        """Yield ``(flake, (y0, x0, alpha_window))`` in compositing order."""
        for k in self.order:
            yield k, self._window(k)

    def anchors(self) -> dict:
        """Integer splat base per flake; the forward map is smooth while these are fixed."""
        return {k: self._window(k)[:2] for k in self.order}

    def footprint(self, k) -> "FlakeFootprint":
        b, r = self.where[k]
        bk = self.buckets[b]
        c = (bk.A - 1) / 2.0
        return FlakeFootprint(anchor=(bk.x0[r] + bk.fx[r] + c, bk.y0[r] + bk.fy[r] + c),
                              alpha=bk.alpha[r], window=bk.win[r],
                              origin=(int(bk.y0[r]), int(bk.x0[r])))

    def replay(self) -> np.ndarray:
        img = self.background.copy()
        h, w = self.shape
        for k, (y0, x0, a) in self.windows():
            ys, xs, sa = _clip(y0, x0, a.shape[0], h, w)
            aa = a[sa][..., None]
            img[ys, xs] = img[ys, xs] + aa * (self.color - img[ys, xs])
        return img


@dataclass
class FlakeFootprint:
    anchor: tuple
    alpha: np.ndarray
    window: np.ndarray
    origin: tuple


@dataclass
class RenderTape:
    frames: tuple          # (FrameTape for t, FrameTape for t+1)
    n_flakes: int


def _clip(y0, x0, n, h, w):
    ya, yb = max(y0, 0), min(y0 + n, h)
    xa, xb = max(x0, 0), min(x0 + n, w)
    if ya >= yb or xa >= xb:
        return slice(0, 0), slice(0, 0), (slice(0, 0), slice(0, 0))
    return slice(ya, yb), slice(xa, xb), (slice(ya - y0, yb - y0), slice(xa - x0, xb - x0))


def _render_frame(background, depthmap, K, Wc, P, d_cached, field, params, coef, stages):
    """Render one frame. ``Wc`` (3x4) maps world points to this camera."""
    h, w = depthmap.shape
    n = len(P)
    color = np.asarray(params.flake_color, dtype=np.float64)
    tape = FrameTape(shape=(h, w), background=background, color=color,
                     softness=params.visibility_softness, stages=stages, n_flakes=n)
    img = background.copy()
    if n == 0:
        tape.image = img
        return img, tape

    R = Wc[:, :3]
    Xc = P @ R.T + Wc[:, 3]
    uvd = geometry.project_camera(K, Xc)
    u, v, z = uvd[:, 0], uvd[:, 1], uvd[:, 2]
    fxl = K[0, 0]
    ok = (z > geometry.Z_EPS) & (d_cached > geometry.Z_EPS)
    d_ref = np.where(ok, d_cached, 1.0)
    radius0 = fxl * field.world_size / d_ref if stages.scaling else np.full(n, UNSCALED_RADIUS_PX)
    rb = psf_radius(d_ref, params) if stages.blur else np.zeros(n)
    A_all = _patch_size(radius0, rb)
    # cull flakes whose patch cannot touch the image
    reach = A_all / 2.0 + 1
    ok &= (u > -reach) & (u < w + reach) & (v > -reach) & (v < h + reach)
    theta_all = sigmoid(field.w) if stages.transparency else np.ones(n)
    J_all = np.zeros((n, 3, 3))
    if np.any(ok):
        J_all[ok] = geometry.projection_jacobian(K, Xc[ok]) @ R
    res = coef.shape[-1] - 2 * _TEMPLATE_PAD
    half = (res - 1) / 2.0
    eps = params.visibility_softness

    for A in sorted(set(A_all[ok].tolist())):
        sel = np.nonzero(ok & (A_all == A))[0]
        c = (A - 1) / 2.0
        off = np.arange(A) - c
        ox, oy = off[None, None, :], off[None, :, None]
        cr, sr = np.cos(field.rotation[sel]), np.sin(field.rotation[sel])
        cr, sr = cr[:, None, None], sr[:, None, None]
        rx = cr * ox + sr * oy
        ry = -sr * ox + cr * oy
        if stages.scaling:
            k_s = (half / (fxl * field.world_size[sel]))[:, None, None]
            s = z[sel][:, None, None] * k_s
        else:
            k_s = np.zeros((len(sel), 1, 1))
            s = np.full((len(sel), 1, 1), half / UNSCALED_RADIUS_PX)
        S, dS_dty, dS_dtx = sample_templates(coef, field.template_id[sel], ry * s + half, rx * s + half)
        dS_dz = dS_dtx * rx * k_s + dS_dty * ry * k_s
        B = np.empty_like(S)
        dB_dz = np.empty_like(S)
        for r in np.unique(rb[sel]):
            g = rb[sel] == r
            ker = disk_kernel(float(r))
            B[g] = _convolve_same(S[g], ker)
            dB_dz[g] = _convolve_same(dS_dz[g], ker)

        ax = u[sel] - c
        ay = v[sel] - c
        x0 = np.floor(ax).astype(np.intp)
        y0 = np.floor(ay).astype(np.intp)
        fx, fy = ax - x0, ay - y0
        if stages.occlusion:
            px = ax[:, None, None] + np.arange(A)[None, None, :]
            py = ay[:, None, None] + np.arange(A)[None, :, None]
            D, Dx, Dy = bilinear_clamped(depthmap, np.broadcast_to(px, (len(sel), A, A)),
                                         np.broadcast_to(py, (len(sel), A, A)))
            vis = sigmoid((D - z[sel][:, None, None]) / eps)
        else:
            vis = np.ones_like(S)
            Dx = Dy = np.zeros_like(S)
        th = theta_all[sel]
        alpha = th[:, None, None] * vis * B
        fx3, fy3 = fx[:, None, None], fy[:, None, None]
        win = np.zeros((len(sel), A + 1, A + 1))
        win[:, :A, :A] += (1 - fy3) * (1 - fx3) * alpha
        win[:, :A, 1:] += (1 - fy3) * fx3 * alpha
        win[:, 1:, :A] += fy3 * (1 - fx3) * alpha
        win[:, 1:, 1:] += fy3 * fx3 * alpha
        bidx = len(tape.buckets)
        tape.buckets.append(_Bucket(sel, A, x0, y0, fx, fy, alpha, win, th, vis, B, dB_dz,
                                    Dx, Dy, J_all[sel]))
        for r, k in enumerate(sel):
            tape.where[int(k)] = (bidx, r)

    # back to front, ties by index
    ids = np.array(sorted(tape.where))
    order = ids[np.lexsort((ids, -z[ids]))] if len(ids) else ids
    for k in order.tolist():
        y0, x0, a = tape._window(k)
        ys, xs, sa = _clip(y0, x0, a.shape[0], h, w)
        if ys.start == ys.stop:
            continue
        under = img[ys, xs].copy()
        aa = a[sa][..., None]
        img[ys, xs] = under + aa * (color - under)
        tape.under[k] = under
        tape.order.append(k)
    tape.image = img
    return img, tape


def render_pair(scene: ScenePair, field, params: RenderParams, stages: Stages = FULL):
    """Render the snowfield into both frames; returns ``(I_t, I_t1, tape)``."""
    coef = _pad_templates(field.templates) if len(field) else np.zeros((1, 8, 8))
    P_t, P_t1 = frame_positions(field)
    W_t = scene.pose_t.Rt
    # frame t+1 camera = relative transform applied after the frame-t camera
    A = geometry.relative_transform(scene.pose_t, scene.pose_t1)
    W_t1 = geometry.compose(A, W_t)
    I_t, tape_t = _render_frame(scene.frame_t, scene.depth_t, scene.pose_t.K, W_t, P_t,
                                field.d_t, field, params, coef, stages)
    I_t1, tape_t1 = _render_frame(scene.frame_t1, scene.depth_t1, scene.pose_t1.K, W_t1, P_t1,
                                  field.d_t1, field, params, coef, stages)
    return I_t, I_t1, RenderTape((tape_t, tape_t1), len(field))


def render_frame_t(scene: ScenePair, field, params: RenderParams, stages: Stages = FULL):
    coef = _pad_templates(field.templates) if len(field) else np.zeros((1, 8, 8))
    P_t, _ = frame_positions(field)
    return _render_frame(scene.frame_t, scene.depth_t, scene.pose_t.K, scene.pose_t.Rt, P_t,
                         field.d_t, field, params, coef, stages)


# -- backward ----------------------------------------------------------------

def _frame_backward(tape: FrameTape, G: np.ndarray):
    """Gradients of one frame w.r.t. flake world position and theta."""
    n = tape.n_flakes
    g_pos = np.zeros((n, 3))
    g_theta = np.zeros(n)
    if not tape.order:
        return g_pos, g_theta
    h, w = tape.shape
    G = np.array(G, dtype=np.float64)
    ga_rows = {}
    for k in reversed(tape.order):
        y0, x0, a = tape._window(k)
        ys, xs, sa = _clip(y0, x0, a.shape[0], h, w)
        g = np.zeros_like(a)
        g[sa] = np.einsum("ijc,ijc->ij", G[ys, xs], tape.color - tape.under[k])
        G[ys, xs] *= (1.0 - a[sa])[..., None]
        ga_rows[k] = g

    eps = tape.softness
    for bk in tape.buckets:
        A = bk.A
        ga = np.stack([ga_rows.get(int(k), np.zeros((A + 1, A + 1))) for k in bk.idx])
        fx3, fy3 = bk.fx[:, None, None], bk.fy[:, None, None]
        g00, g01 = ga[:, :A, :A], ga[:, :A, 1:]
        g10, g11 = ga[:, 1:, :A], ga[:, 1:, 1:]
        g_alpha = ((1 - fy3) * (1 - fx3) * g00 + (1 - fy3) * fx3 * g01
                   + fy3 * (1 - fx3) * g10 + fy3 * fx3 * g11)
        g_u = np.sum(bk.alpha * ((1 - fy3) * (g01 - g00) + fy3 * (g11 - g10)), axis=(1, 2))
        g_v = np.sum(bk.alpha * ((1 - fx3) * (g10 - g00) + fx3 * (g11 - g01)), axis=(1, 2))
        th3 = bk.theta[:, None, None]
        g_vis = g_alpha * th3 * bk.B
        g_B = g_alpha * th3 * bk.vis
        slope = g_vis * bk.vis * (1 - bk.vis) / eps
        g_u += np.sum(slope * bk.Dx, axis=(1, 2))
        g_v += np.sum(slope * bk.Dy, axis=(1, 2))
        g_z = np.sum(g_B * bk.dB_dz, axis=(1, 2)) - np.sum(slope, axis=(1, 2))
        g_uvz = np.stack([g_u, g_v, g_z], axis=1)
        g_pos[bk.idx] = np.einsum("nij,ni->nj", bk.J, g_uvz)
        g_theta[bk.idx] = np.sum(g_alpha * bk.vis * bk.B, axis=(1, 2))
    return g_pos, g_theta


def backward(tape: RenderTape, grad_t: np.ndarray, grad_t1: np.ndarray) -> dict:
    """Reverse pass: upstream image gradients to per-flake parameter gradients.

    Returns ``{"delta_t": (N, 3), "delta_t1": (N, 3), "w": (N,)}``.
    """
    ft, ft1 = tape.frames
    for g, f in ((grad_t, ft), (grad_t1, ft1)):
        if np.shape(g) != f.background.shape:
            raise ValueError(f"gradient shape {np.shape(g)} does not match image {f.background.shape}")
    if ft.stages != FULL:
        raise ValueError("backward needs a tape from a full render")
    g_pos_t, g_th_t = _frame_backward(ft, grad_t)
    g_pos_t1, g_th_t1 = _frame_backward(ft1, grad_t1)
    theta = np.zeros(tape.n_flakes)
    for f in (ft, ft1):
        for bk in f.buckets:
            theta[bk.idx] = bk.theta
    g_theta = g_th_t + g_th_t1
    return {"delta_t": g_pos_t, "delta_t1": g_pos_t1, "w": g_theta * theta * (1 - theta)}
