"""File formats for scenes: PPM frames, PFM depth, Middlebury .flo, binary cameras.

In memory, images are ``(H, W, 3)`` float64 arrays in [0, 1], depth maps are
``(H, W)`` float64 arrays of positive depth and flow fields are ``(H, W, 2)``
float64 arrays holding ``(u, v)`` per pixel.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FLO_MAGIC = 202021.25
ROTATION_TOL = 1e-6


class FormatError(ValueError):
    """Raised for malformed or inconsistent files."""


@dataclass(frozen=True)
class CameraPose:
    """Pinhole camera: intrinsics ``K`` (3x3) and world-to-camera ``Rt`` (3x4)."""

    K: np.ndarray
    Rt: np.ndarray

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        Rt = np.asarray(self.Rt, dtype=np.float64).reshape(3, 4)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "Rt", Rt)
        validate_pose(self)

    @property
    def R(self) -> np.ndarray:
        return self.Rt[:, :3]

    @property
    def t(self) -> np.ndarray:
        return self.Rt[:, 3]

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @classmethod
    def from_params(cls, fx, fy, cx, cy, R=None, t=None) -> "CameraPose":
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        R = np.eye(3) if R is None else np.asarray(R, dtype=np.float64)
        t = np.zeros(3) if t is None else np.asarray(t, dtype=np.float64)
        return cls(K, np.hstack([R, t[:, None]]))


def validate_pose(pose: CameraPose) -> None:
    K = pose.K
    if not (np.all(np.isfinite(K)) and np.all(np.isfinite(pose.Rt))):
        raise FormatError("camera matrices must be finite")
    if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
        raise FormatError("intrinsic matrix must be upper-triangular")
    if K[0, 0] <= 0 or K[1, 1] <= 0:
        raise FormatError("focal lengths must be positive")
    R = pose.Rt[:, :3]
    dev = np.linalg.norm(R @ R.T - np.eye(3))
    if dev > ROTATION_TOL:
        raise FormatError(f"rotation block not orthonormal (deviation {dev:.3g})")


@dataclass
class ScenePair:
    """Two frames with depth, cameras and optional background flow."""

    frame_t: np.ndarray
    frame_t1: np.ndarray
    depth_t: np.ndarray
    depth_t1: np.ndarray
    pose_t: CameraPose
    pose_t1: CameraPose
    gt_flow: np.ndarray | None = None

    def __post_init__(self):
        h, w = self.depth_t.shape
        for name in ("frame_t", "frame_t1"):
            if getattr(self, name).shape != (h, w, 3):
                raise FormatError(f"{name} has shape {getattr(self, name).shape}, expected {(h, w, 3)}")
        if self.depth_t1.shape != (h, w):
            raise FormatError("depth maps differ in size")
        if self.gt_flow is not None and self.gt_flow.shape != (h, w, 2):
            raise FormatError("ground-truth flow has the wrong size")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth_t.shape


def write_atomic(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


# -- PPM ---------------------------------------------------------------------

def _ppm_tokens(buf: bytes, count: int):
    """Parse ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise FormatError("truncated PPM header")
        if buf[pos:pos + 1] == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise FormatError("truncated PPM header")
            pos = end + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    tokens, offset = _ppm_tokens(buf, 4)
    if tokens[0] != b"P6":
        raise FormatError(f"not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError("non-integer PPM header field") from exc
    if w <= 0 or h <= 0:
        raise FormatError("PPM dimensions must be positive")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}")
    raster = buf[offset:offset + w * h * 3]
    if len(raster) != w * h * 3:
        raise FormatError("truncated PPM payload")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3) / 255.0


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise FormatError("image must have shape (H, W, 3)")
    if not np.all(np.isfinite(image)):
        raise FormatError("image contains non-finite values")
    h, w, _ = image.shape
    q = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (w, h) + q.tobytes()


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_ppm(image: np.ndarray, path) -> None:
    write_atomic(path, encode_ppm(image))


# -- PFM ---------------------------------------------------------------------

def decode_pfm(buf: bytes) -> np.ndarray:
    lines, pos = [], 0
    for _ in range(3):
        end = buf.find(b"\n", pos)
        if end < 0:
            raise FormatError("truncated PFM header")
        lines.append(buf[pos:end].strip())
        pos = end + 1
    if lines[0] == b"PF":
        raise FormatError("color PFM not supported for depth")
    if lines[0] != b"Pf":
        raise FormatError(f"not a PFM file (magic {lines[0]!r})")
    try:
        w, h = (int(t) for t in lines[1].split())
        scale = float(lines[2])
    except ValueError as exc:
        raise FormatError("malformed PFM header") from exc
    if scale == 0:
        raise FormatError("PFM scale must be nonzero")
    dtype = "<f4" if scale < 0 else ">f4"
    payload = buf[pos:pos + 4 * w * h]
    if len(payload) != 4 * w * h:
        raise FormatError("truncated PFM payload")
    # stored bottom-up
    depth = np.frombuffer(payload, dtype=dtype).reshape(h, w)[::-1].astype(np.float64)
    if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
        raise FormatError("depth map must be finite and strictly positive")
    return depth


def encode_pfm(depth: np.ndarray) -> bytes:
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise FormatError("depth map must be 2-D")
    h, w = depth.shape
    body = np.ascontiguousarray(depth[::-1], dtype="<f4").tobytes()
    return b"Pf\n%d %d\n-1.0\n" % (w, h) + body


def read_pfm(path) -> np.ndarray:
    return decode_pfm(Path(path).read_bytes())


def write_pfm(depth: np.ndarray, path) -> None:
    write_atomic(path, encode_pfm(depth))


# -- Middlebury .flo ---------------------------------------------------------

def decode_flo(buf: bytes) -> np.ndarray:
    if len(buf) < 12:
        raise FormatError("truncated .flo header")
    magic, w, h = struct.unpack("<fii", buf[:12])
    if magic != FLO_MAGIC:
        raise FormatError(f"bad .flo magic {magic!r}")
    if w <= 0 or h <= 0:
        raise FormatError("bad .flo dimensions")
    if len(buf) != 12 + 8 * w * h:
        raise FormatError(f".flo payload size {len(buf) - 12} does not match {w}x{h}")
    return np.frombuffer(buf, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float64)


def encode_flo(flow: np.ndarray) -> bytes:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise FormatError("flow must have shape (H, W, 2)")
    h, w, _ = flow.shape
    return struct.pack("<fii", FLO_MAGIC, w, h) + np.ascontiguousarray(flow, dtype="<f4").tobytes()


def read_flo(path) -> np.ndarray:
    return decode_flo(Path(path).read_bytes())


def write_flo(flow: np.ndarray, path) -> None:
    write_atomic(path, encode_flo(flow))


# -- cameras -----------------------------------------------------------------

_CAM_BYTES = 21 * 8


def decode_cam(buf: bytes) -> CameraPose:
    # Sintel's own files carry the .flo magic as a 4-byte prefix; accept both.
    if len(buf) == _CAM_BYTES + 4 and struct.unpack("<f", buf[:4])[0] == FLO_MAGIC:
        buf = buf[4:]
    if len(buf) != _CAM_BYTES:
        raise FormatError(f"camera file has {len(buf)} bytes, expected {_CAM_BYTES}")
    vals = np.frombuffer(buf, dtype="<f8")
    return CameraPose(vals[:9].reshape(3, 3).copy(), vals[9:].reshape(3, 4).copy())


def encode_cam(pose: CameraPose) -> bytes:
    return (np.ascontiguousarray(pose.K, dtype="<f8").tobytes()
            + np.ascontiguousarray(pose.Rt, dtype="<f8").tobytes())


def read_cam(path) -> CameraPose:
    return decode_cam(Path(path).read_bytes())


def write_cam(pose: CameraPose, path) -> None:
    write_atomic(path, encode_cam(pose))


# -- scene directories -------------------------------------------------------

SCENE_FILES = {
    "frame_t": "frame_t.ppm",
    "frame_t1": "frame_t1.ppm",
    "depth_t": "depth_t.pfm",
    "depth_t1": "depth_t1.pfm",
    "pose_t": "cam_t.cam",
    "pose_t1": "cam_t1.cam",
}
GT_FLOW_FILE = "gt_flow.flo"


def load_scene(scene_dir) -> ScenePair:
    scene_dir = Path(scene_dir)
    missing = [n for n in SCENE_FILES.values() if not (scene_dir / n).is_file()]
    if missing:
        raise FileNotFoundError(f"scene {scene_dir} is missing {', '.join(missing)}")
    gt = scene_dir / GT_FLOW_FILE
    return ScenePair(
        frame_t=read_ppm(scene_dir / SCENE_FILES["frame_t"]),
        frame_t1=read_ppm(scene_dir / SCENE_FILES["frame_t1"]),
        depth_t=read_pfm(scene_dir / SCENE_FILES["depth_t"]),
        depth_t1=read_pfm(scene_dir / SCENE_FILES["depth_t1"]),
        pose_t=read_cam(scene_dir / SCENE_FILES["pose_t"]),
        pose_t1=read_cam(scene_dir / SCENE_FILES["pose_t1"]),
        gt_flow=read_flo(gt) if gt.is_file() else None,
    )


def save_scene(scene: ScenePair, scene_dir) -> None:
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    write_ppm(scene.frame_t, scene_dir / SCENE_FILES["frame_t"])
    write_ppm(scene.frame_t1, scene_dir / SCENE_FILES["frame_t1"])
    write_pfm(scene.depth_t, scene_dir / SCENE_FILES["depth_t"])
    write_pfm(scene.depth_t1, scene_dir / SCENE_FILES["depth_t1"])
    write_cam(scene.pose_t, scene_dir / SCENE_FILES["pose_t"])
    write_cam(scene.pose_t1, scene_dir / SCENE_FILES["pose_t1"])
    if scene.gt_flow is not None:
        write_flo(scene.gt_flow, scene_dir / GT_FLOW_FILE)


# -- flow visualization ------------------------------------------------------

def make_colorwheel() -> np.ndarray:
    """Middlebury color wheel, ``(55, 3)`` in 0..255."""
    RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6
    segments = [
        (RY, lambda r: np.stack([np.full_like(r, 255), 255 * r / RY, 0 * r], 1)),
        (YG, lambda r: np.stack([255 - 255 * r / YG, np.full_like(r, 255), 0 * r], 1)),
        (GC, lambda r: np.stack([0 * r, np.full_like(r, 255), 255 * r / GC], 1)),
        (CB, lambda r: np.stack([0 * r, 255 - 255 * r / CB, np.full_like(r, 255)], 1)),
        (BM, lambda r: np.stack([255 * r / BM, 0 * r, np.full_like(r, 255)], 1)),
        (MR, lambda r: np.stack([np.full_like(r, 255), 0 * r, 255 - 255 * r / MR], 1)),
    ]
    return np.concatenate([fn(np.arange(n, dtype=np.float64)) for n, fn in segments])


def flow_to_color(flow: np.ndarray, max_magnitude: float | None = None) -> np.ndarray:
    """Color-code a flow field; zero motion is white, hue encodes direction.

    ``max_magnitude`` sets the saturation radius; ``None`` uses the largest
    magnitude present in the field.
    """
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[..., 0], flow[..., 1]
    mag = np.hypot(u, v)
    if max_magnitude is None:
        max_magnitude = float(mag.max()) if mag.size else 0.0
    rad = mag / max_magnitude if max_magnitude > 0 else np.zeros_like(mag)

    wheel = make_colorwheel() / 255.0
    ncols = wheel.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1.0) / 2.0 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    frac = (fk - k0)[..., None]
    col = (1 - frac) * wheel[k0] + frac * wheel[k1]
    r = rad[..., None]
    inside = r <= 1
    col = np.where(inside, 1 - r * (1 - col), col * 0.75)
    return np.clip(col, 0.0, 1.0)
