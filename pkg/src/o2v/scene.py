"""Camera, pose, ray and frame primitives shared by every other module.

Conventions, fixed once here:
  * Depth images store plane depth (camera-z), not ray length. 0 marks an
    invalid measurement.
  * Poses map camera coordinates into world coordinates: p_w = R @ p_c + t.
  * Pixel coordinates are continuous; integer (u, v) addresses the center of
    pixel column u, row v, so u = cx lands exactly on the optical axis.

Everything in this module is immutable after construction and safe to share
across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CameraIntrinsics",
    "Pose",
    "RGBDFrame",
    "Ray",
    "SceneBounds",
    "pixel_to_ray",
    "backproject",
    "backproject_pixels",
    "ray_depth_scale",
    "project",
]


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise ValueError("principal point must lie strictly inside the image")


@dataclass(frozen=True)
class Pose:
    """Rigid transform, world <- camera."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation determinant is not +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        """self after other: maps other's camera frame through self."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to (..., 3) camera-frame points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray  # (3,)
    direction: np.ndarray  # (3,), unit length

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"ray direction must be unit length, |d|={n}")
        o.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class SceneBounds:
    min: np.ndarray  # (3,)
    max: np.ndarray  # (3,)

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max, dtype=np.float64).reshape(3)
        if not np.all(lo < hi):
            raise ValueError(f"degenerate bounds: min={lo} max={hi}")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return np.all((pts >= self.min) & (pts <= self.max), axis=-1)


@dataclass(frozen=True)
class RGBDFrame:
    """One posed RGBD observation. rgb in [0, 1], depth in meters (0 = invalid)."""

    frame_id: int
    rgb: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    pose: Pose
    intrinsics: CameraIntrinsics
    max_range: float = field(default=10.0)

    def __post_init__(self):
        k = self.intrinsics
        rgb = np.asarray(self.rgb, dtype=np.float32)
        depth = np.asarray(self.depth, dtype=np.float32)
        if rgb.shape != (k.height, k.width, 3):
            raise ValueError(f"rgb shape {rgb.shape} does not match intrinsics "
                             f"{(k.height, k.width, 3)}")
        if depth.shape != (k.height, k.width):
            raise ValueError(f"depth shape {depth.shape} does not match intrinsics")
        if depth.min() < 0 or depth.max() > self.max_range:
            raise ValueError("depth values must lie in [0, max_range]")
        rgb.setflags(write=False)
        depth.setflags(write=False)
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "depth", depth)

    def valid_depth_mask(self) -> np.ndarray:
        return self.depth > 0


def _camera_dirs(intrinsics: CameraIntrinsics, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Unnormalized camera-frame directions with z = 1, shape (..., 3)."""
    x = (np.asarray(u, dtype=np.float64) - intrinsics.cx) / intrinsics.fx
    y = (np.asarray(v, dtype=np.float64) - intrinsics.cy) / intrinsics.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def _check_pixel(intrinsics: CameraIntrinsics, u: float, v: float) -> None:
    if not (0 <= u < intrinsics.width and 0 <= v < intrinsics.height):
        raise ValueError(f"pixel ({u}, {v}) outside {intrinsics.width}x{intrinsics.height} image")


def pixel_to_ray(frame: RGBDFrame, u: float, v: float) -> Ray:
    """World-frame viewing ray through pixel (u, v), unit direction."""
    _check_pixel(frame.intrinsics, u, v)
    d_cam = _camera_dirs(frame.intrinsics, u, v)
    d_world = frame.pose.rotation @ d_cam
    return Ray(frame.pose.translation, d_world / np.linalg.norm(d_world))


def backproject(frame: RGBDFrame, u: float, v: float) -> np.ndarray | None:
    """World point for pixel (u, v) at its measured plane depth, or None if invalid.

    The camera direction is scaled so its z component is 1 before rotation,
    which makes the stored depth multiply straight through.
    """
    _check_pixel(frame.intrinsics, u, v)
    z = float(frame.depth[int(round(v)), int(round(u))])
    if z == 0.0:
        return None
    d_cam = _camera_dirs(frame.intrinsics, u, v)
    return frame.pose.transform(d_cam * z)


def backproject_pixels(frame: RGBDFrame, us: np.ndarray, vs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized backprojection. Returns (points (N, 3), valid (N,) bool).

    Rows with invalid depth carry arbitrary coordinates and valid=False.
    """
    us = np.asarray(us)
    vs = np.asarray(vs)
    z = frame.depth[vs.astype(np.intp), us.astype(np.intp)].astype(np.float64)
    d_cam = _camera_dirs(frame.intrinsics, us, vs)
    pts = frame.pose.transform(d_cam * z[..., None])
    return pts, z > 0


def ray_depth_scale(intrinsics: CameraIntrinsics, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
    """Per-pixel factor converting plane depth (camera z) to ray length.

    Equal to the norm of the camera direction whose z component is 1, so
    ray_length = plane_depth * ray_depth_scale(...). Always >= 1.
    """
    return np.linalg.norm(_camera_dirs(intrinsics, us, vs), axis=-1)


def project(frame: RGBDFrame, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """World points (..., 3) -> (u, v, plane depth) in camera of `frame`."""
    k = frame.intrinsics
    p_cam = (np.asarray(points, dtype=np.float64) - frame.pose.translation) @ frame.pose.rotation
    z = p_cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * p_cam[..., 0] / z + k.cx
        v = k.fy * p_cam[..., 1] / z + k.cy
    return u, v, z
