"""Synthetic scenes: the translating-texture fixture and small random scenes."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .scenefmt import CameraPose, ScenePair, load_scene

FIXTURE_NAME = "translating_texture"


def smooth_noise(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    """Periodic Gaussian-filtered white noise, normalized to zero mean, unit std."""
    h, w = shape
    noise = rng.standard_normal((h, w))
    ky = np.fft.fftfreq(h)[:, None]
    kx = np.fft.fftfreq(w)[None, :]
    gain = np.exp(-2 * (np.pi * scale) ** 2 * (kx ** 2 + ky ** 2))
    out = np.real(np.fft.ifft2(np.fft.fft2(noise) * gain))
    return (out - out.mean()) / out.std()


def texture(rng, shape, lo=0.15, hi=0.75) -> np.ndarray:
    """RGB texture from two octaves of smooth noise, squashed into [lo, hi]."""
    chans = []
    base = smooth_noise(rng, shape, 3.0) + 0.5 * smooth_noise(rng, shape, 1.2)
    for _ in range(3):
        c = base + 0.3 * smooth_noise(rng, shape, 2.0)
        chans.append(lo + (hi - lo) / (1 + np.exp(-1.2 * c)))
    return np.stack(chans, axis=-1)


def translating_texture(size: int = 96, shift=(2, 1), depth: float = 2.0, seed: int = 0) -> ScenePair:
    """Static camera over a fronto-parallel periodic texture that slides by ``shift`` px.

    ``frame_t1(x) = frame_t(x - shift)`` with wrap-around, so the background
    flow is exactly ``shift`` everywhere.
    """
    rng = np.random.default_rng(seed)
    img = texture(rng, (size, size))
    du, dv = shift
    img1 = np.roll(img, (dv, du), axis=(0, 1))
    # quantize once so the scene round-trips through PPM unchanged
    img = np.rint(img * 255) / 255
    img1 = np.rint(img1 * 255) / 255
    f = float(size)
    c = (size - 1) / 2.0
    pose = CameraPose.from_params(f, f, c, c)
    dmap = np.full((size, size), float(depth))
    flow = np.zeros((size, size, 2))
    flow[..., 0], flow[..., 1] = du, dv
    return ScenePair(img, img1, dmap, dmap.copy(), pose, pose, flow)


def _rotation(rng, max_angle):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    a = rng.uniform(-max_angle, max_angle)
    Kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(a) * Kx + (1 - np.cos(a)) * Kx @ Kx


def random_scene(rng: np.random.Generator, size: int = 16, depth=(1.5, 3.0)) -> ScenePair:
    """Small scene with textured frames, uneven depth and a slightly moving camera."""
    shape = (size, size)
    img = texture(rng, shape)
    img1 = np.clip(np.roll(img, 1, axis=1) + 0.02 * rng.standard_normal(img.shape), 0, 1)
    lo, hi = depth
    d0 = lo + (hi - lo) / (1 + np.exp(-smooth_noise(rng, shape, 2.0)))
    d1 = lo + (hi - lo) / (1 + np.exp(-smooth_noise(rng, shape, 2.0)))
    f = float(size)
    c = (size - 1) / 2.0
    pose_t = CameraPose.from_params(f, f, c, c)
    pose_t1 = CameraPose.from_params(f, f, c, c, R=_rotation(rng, 0.03),
                                     t=rng.uniform(-0.05, 0.05, 3))
    return ScenePair(img, img1, d0, d1, pose_t, pose_t1, np.zeros((size, size, 2)))


def fixture_dir() -> Path:
    return Path(str(resources.files("snowattack") / "data" / FIXTURE_NAME))


def load_fixture() -> ScenePair:
    return load_scene(fixture_dir())
