"""Depth-frame preprocessing: hand crop, sliced volume, augmentation, pose normalization.

Image coordinates put pixel ``u`` over the interval ``[u, u+1)``. The
normalized frame covers ``[-1, 1]`` on both image axes, with x running
along columns and y along rows (downwards), so the output pixel grid and
normalized pose coordinates line up exactly and rotations of the image
about its centre are rotations of (x, y) about the origin.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NoHandError, ParameterError

AUGMENT_OPS = ("rot90", "rot-90", "rot180", "flip_h", "flip_v")


@dataclass(frozen=True)
class Intrinsics:
    fx: float = 588.03
    fy: float = 587.07
    cx: float = 320.0
    cy: float = 240.0

    def project(self, xyz: np.ndarray) -> np.ndarray:
        """World mm (..., 3) -> (u, v, depth)."""
        x, y, z = xyz[..., 0], xyz[..., 1], xyz[..., 2]
        return np.stack([self.fx * x / z + self.cx, self.fy * y / z + self.cy, z], axis=-1)

    def backproject(self, uvd: np.ndarray) -> np.ndarray:
        u, v, d = uvd[..., 0], uvd[..., 1], uvd[..., 2]
        return np.stack([(u - self.cx) * d / self.fx, (v - self.cy) * d / self.fy, d], axis=-1)


@dataclass
class RawDepthFrame:
    depth: np.ndarray
    sentinel: float = 0.0
    camera: Intrinsics = field(default_factory=Intrinsics)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    def valid_mask(self) -> np.ndarray:
        d = self.depth
        return np.isfinite(d) & (d != self.sentinel) & (d > 0)


@dataclass
class DepthFrame:
    """Cropped, resized hand image with depth mapped to [-1, 1].

    ``camera`` is None for frames that only exist in normalized form (for
    instance loaded from a dataset container); their millimetre frame is the
    cube-local one, ``mm = normalized * cube_mm / 2``.
    """

    values: np.ndarray
    mask: np.ndarray
    cube_mm: float
    d_center: float
    d_min: float
    d_max: float
    crop_box: tuple[float, float, float, float]
    camera: Intrinsics | None = None

    @property
    def size(self) -> int:
        return self.values.shape[0]

    @property
    def center_uv(self) -> tuple[float, float]:
        u0, v0, u1, v1 = self.crop_box
        return (u0 + u1) / 2, (v0 + v1) / 2

    @property
    def half_px(self) -> tuple[float, float]:
        u0, v0, u1, v1 = self.crop_box
        return (u1 - u0) / 2, (v1 - v0) / 2

    @classmethod
    def from_normalized(cls, values: np.ndarray, cube_mm: float = 300.0, mask: np.ndarray | None = None):
        values = np.asarray(values)
        if mask is None:
            mask = values < 1.0
        half = cube_mm / 2
        fg = values[mask]
        lo, hi = (float(fg.min()) * half, float(fg.max()) * half) if fg.size else (0.0, 0.0)
        m = values.shape[0]
        return cls(values, mask, cube_mm, 0.0, lo, hi, (0.0, 0.0, float(m), float(m)))

    def to_raw(self, sentinel: float = 0.0) -> RawDepthFrame:
        """Express the crop as a raw frame of its own (needs a camera)."""
        if self.camera is None:
            raise ParameterError("frame has no camera model")
        m = self.size
        u0, v0, _, _ = self.crop_box
        hu, hv = self.half_px
        su, sv = m / (2 * hu), m / (2 * hv)
        cam = Intrinsics(self.camera.fx * su, self.camera.fy * sv,
                         (self.camera.cx - u0) * su, (self.camera.cy - v0) * sv)
        depth = np.where(self.mask, self.d_center + self.values.astype(np.float64) * self.cube_mm / 2, sentinel)
        return RawDepthFrame(depth, sentinel, cam)


@dataclass
class SlicedVolume:
    voxels: np.ndarray  # (M, M, L) uint8

    @property
    def M(self) -> int:
        return self.voxels.shape[0]

    @property
    def L(self) -> int:
        return self.voxels.shape[2]

    def as_channels(self, dtype=np.float32) -> np.ndarray:
        """(L, M, M) layout consumed by the volume branch."""
        return np.ascontiguousarray(self.voxels.transpose(2, 0, 1), dtype=dtype)


@dataclass
class HandPose:
    coords: np.ndarray  # (K, 3)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)

    @property
    def K(self) -> int:
        return self.coords.shape[0]

    def flat(self) -> np.ndarray:
        return self.coords.reshape(-1)


def crop_hand(frame: RawDepthFrame, cube_mm: float = 300.0, size: int = 128) -> DepthFrame:
    """Crop a cube of side ``cube_mm`` around the hand's 3D centre of mass.

    Depth is mapped so the centre-of-mass depth goes to 0 and the near/far
    cube faces to -1/+1. Pixels outside the cube, invalid pixels and pixels
    beyond the image border become background (+1, mask False).
    """
    valid = frame.valid_mask()
    if not valid.any():
        raise NoHandError("frame has no valid depth pixels")
    cam = frame.camera
    vs, us = np.nonzero(valid)
    d = frame.depth[valid].astype(np.float64)
    pts = cam.backproject(np.stack([us + 0.5, vs + 0.5, d], axis=-1))
    com = pts.mean(axis=0)
    uc, vc, dc = cam.project(com)
    cu, cv = float(np.rint(uc)), float(np.rint(vc))
    half = cube_mm / 2
    hu, hv = half * cam.fx / dc, half * cam.fy / dc

    centers = (np.arange(size) + 0.5) / size * 2 - 1
    src_u = np.floor(cu + centers * hu).astype(np.int64)
    src_v = np.floor(cv + centers * hv).astype(np.int64)
    inside_u = (src_u >= 0) & (src_u < frame.width)
    inside_v = (src_v >= 0) & (src_v < frame.height)
    grid_valid = inside_v[:, None] & inside_u[None, :]
    sampled = frame.depth[np.clip(src_v, 0, frame.height - 1)[:, None], np.clip(src_u, 0, frame.width - 1)[None, :]]
    ok = grid_valid & valid[np.clip(src_v, 0, frame.height - 1)[:, None], np.clip(src_u, 0, frame.width - 1)[None, :]]
    rel = (sampled.astype(np.float64) - dc) / half
    mask = ok & (np.abs(rel) <= 1.0)
    values = np.where(mask, rel, 1.0)
    fg = sampled[mask]
    if fg.size == 0:
        raise NoHandError("no hand pixels inside the crop cube")
    return DepthFrame(values, mask, cube_mm, float(dc), float(fg.min()), float(fg.max()),
                      (cu - hu, cv - hv, cu + hu, cv + hv), cam)


def slice_indices(values: np.ndarray, mask: np.ndarray, L: int) -> np.ndarray:
    """Layer index per pixel (-1 for background) over the trailing two axes.

    Bins split [d_min, d_max] of each frame's foreground into L equal
    half-open pieces; the last bin is closed so d_max lands in layer L-1.
    A frame with d_min == d_max puts every foreground pixel in layer 0.
    """
    if L < 1:
        raise ParameterError(f"L must be >= 1, got {L}")
    v = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    axes = (-2, -1)
    big = np.where(mask, v, np.inf).min(axis=axes, keepdims=True)
    small = np.where(mask, v, -np.inf).max(axis=axes, keepdims=True)
    if not np.all(mask.any(axis=axes)):
        raise NoHandError("frame has no foreground pixels")
    span = small - big
    flat = span == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        idx = np.floor(L * (v - big) / np.where(flat, 1.0, span))
    idx = np.where(flat, 0, np.clip(idx, 0, L - 1))
    return np.where(mask, idx, -1).astype(np.int64)


def slice_volume(frame: DepthFrame, L: int) -> SlicedVolume:
    idx = slice_indices(frame.values, frame.mask, L)
    vox = (idx[..., None] == np.arange(L)).astype(np.uint8)
    return SlicedVolume(vox)


def slice_batch(values: np.ndarray, L: int, dtype=np.float32) -> np.ndarray:
    """(N, M, M) normalized depth -> (N, L, M, M) one-hot slices; background is ``values >= 1``."""
    idx = slice_indices(values, values < 1.0, L)
    return (idx[:, None, :, :] == np.arange(L)[None, :, None, None]).astype(dtype)


_POSE_MAPS = {
    "rot90": lambda x, y: (y, -x),
    "rot-90": lambda x, y: (-y, x),
    "rot180": lambda x, y: (-x, -y),
    "flip_h": lambda x, y: (-x, y),
    "flip_v": lambda x, y: (x, -y),
}


def augment_image(img: np.ndarray, op: str) -> np.ndarray:
    """Apply ``op`` to the trailing two axes."""
    if op == "rot90":
        return np.rot90(img, 1, axes=(-2, -1))
    if op == "rot-90":
        return np.rot90(img, -1, axes=(-2, -1))
    if op == "rot180":
        return np.rot90(img, 2, axes=(-2, -1))
    if op == "flip_h":
        return img[..., :, ::-1]
    if op == "flip_v":
        return img[..., ::-1, :]
    raise ParameterError(f"unknown augmentation {op!r}; expected one of {AUGMENT_OPS}")


def augment_pose(coords: np.ndarray, op: str, center=(0.0, 0.0)) -> np.ndarray:
    """Transform (..., 3) joint coordinates by the image map of ``op``; z is unchanged."""
    if op not in _POSE_MAPS:
        raise ParameterError(f"unknown augmentation {op!r}; expected one of {AUGMENT_OPS}")
    c = np.asarray(coords)
    out = c.copy()
    x, y = c[..., 0] - center[0], c[..., 1] - center[1]
    nx, ny = _POSE_MAPS[op](x, y)
    out[..., 0] = nx + center[0]
    out[..., 1] = ny + center[1]
    return out


def augment(frame: DepthFrame, pose: HandPose, op: str | None = None,
            rng: np.random.Generator | None = None) -> tuple[DepthFrame, HandPose]:
    """Rotate or flip a frame and its normalized pose together.

    With ``op=None`` one op is drawn uniformly from :data:`AUGMENT_OPS`.
    """
    if op is None:
        if rng is None:
            raise ParameterError("augment needs an op or an rng")
        op = AUGMENT_OPS[rng.integers(len(AUGMENT_OPS))]
    values = np.ascontiguousarray(augment_image(frame.values, op))
    mask = np.ascontiguousarray(augment_image(frame.mask, op))
    return replace(frame, values=values, mask=mask), HandPose(augment_pose(pose.coords, op))


def normalize_pose(pose: HandPose, frame: DepthFrame) -> tuple[np.ndarray, int]:
    """World-mm joints -> flat crop-local coordinates in [-1, 1].

    Joints outside the cube are clamped; the second return value counts
    clamped joints.
    """
    half = frame.cube_mm / 2
    if frame.camera is None:
        n = pose.coords / half
    else:
        uvd = frame.camera.project(pose.coords)
        cu, cv = frame.center_uv
        hu, hv = frame.half_px
        n = np.stack([(uvd[:, 0] - cu) / hu, (uvd[:, 1] - cv) / hv, (uvd[:, 2] - frame.d_center) / half], axis=-1)
    outside = np.any(np.abs(n) > 1.0, axis=-1)
    return np.clip(n, -1.0, 1.0).reshape(-1), int(outside.sum())


def denormalize_pose(coords: np.ndarray, frame: DepthFrame) -> HandPose:
    n = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    half = frame.cube_mm / 2
    if frame.camera is None:
        return HandPose(n * half)
    cu, cv = frame.center_uv
    hu, hv = frame.half_px
    uvd = np.stack([cu + n[:, 0] * hu, cv + n[:, 1] * hv, frame.d_center + n[:, 2] * half], axis=-1)
    return HandPose(frame.camera.backproject(uvd))
