"""Pinhole cameras, rigid poses, rays, projection and back-projection.

Conventions used everywhere in the package:

* camera frame is +x right, +y down, +z forward (OpenCV style);
* pixel ``(u, v)`` is (column, row) and covers ``[u, u+1) x [v, v+1)``, so its
  ray passes through ``(u + 0.5, v + 0.5)``;
* every depth value is a Euclidean *ray distance* from the camera center,
  never a camera-frame z coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

BEHIND_EPS = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if int(self.width) != self.width or int(self.height) != self.height:
            raise DomainError("image size must be integral")
        if self.width < 1 or self.height < 1:
            raise DomainError(f"image size must be >= 1, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def shape(self) -> tuple[int, int]:
        """(height, width), the numpy shape of an image from this camera."""
        return (int(self.height), int(self.width))

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": int(self.width), "height": int(self.height)}

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float) -> "CameraIntrinsics":
        f = 0.5 * width / np.tan(0.5 * np.radians(fov_x_deg))
        return cls(fx=float(f), fy=float(f), cx=width / 2.0, cy=height / 2.0,
                   width=width, height=height)


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise DomainError("pose contains non-finite values")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise DomainError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise DomainError("rotation determinant is not +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        if not np.allclose(m[3], [0, 0, 0, 1], atol=1e-9):
            raise DomainError("last row of a pose matrix must be (0, 0, 0, 1)")
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise DomainError("ray direction must be unit length")

    def at(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Pose of a camera at ``eye`` whose optical axis points at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(right)
    if n < 1e-9:
        raise DomainError("up vector is parallel to the viewing direction")
    right /= n
    down = np.cross(forward, right)
    return Pose(np.stack([right, down, forward], axis=1), eye)


def _check_pixels(intr: CameraIntrinsics, u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(u < 0) or np.any(u >= intr.width) or np.any(v < 0) or np.any(v >= intr.height):
        raise DomainError(f"pixel outside {intr.width}x{intr.height} image")
    return u, v


def camera_directions(intr: CameraIntrinsics, u, v) -> np.ndarray:
    """Unit camera-frame directions through the centers of pixels (u, v)."""
    u, v = _check_pixels(intr, u, v)
    d = np.stack([(u + 0.5 - intr.cx) / intr.fx,
                  (v + 0.5 - intr.cy) / intr.fy,
                  np.ones_like(u)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def pixel_ray(intr: CameraIntrinsics, pose: Pose, px) -> Ray:
    u, v = px
    d_cam = camera_directions(intr, u, v)
    return Ray(pose.translation.copy(), pose.rotation @ d_cam)


def pixel_rays(intr: CameraIntrinsics, pose: Pose, u=None, v=None):
    """Origins and unit directions for many pixels; all pixels by default.

    Returns arrays shaped like ``u`` with a trailing axis of 3; with no pixel
    arguments the result is ``(height, width, 3)``.
    """
    if u is None:
        v, u = np.mgrid[0:intr.height, 0:intr.width]
    d_cam = camera_directions(intr, u, v)
    dirs = d_cam @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    return origins, dirs


def project_points(intr: CameraIntrinsics, pose: Pose, points):
    """Vectorized projection.

    Returns ``(uv, dist, valid)``: continuous pixel coordinates ``(N, 2)``,
    ray distances ``(N,)`` and a mask of points in front of the camera.
    Entries where ``valid`` is false are filled with NaN-free placeholders
    (zeros) and must be ignored.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pc = pose.world_to_camera(pts)
    z = pc[:, 2]
    valid = z > BEHIND_EPS
    safe_z = np.where(valid, z, 1.0)
    uv = np.stack([intr.fx * pc[:, 0] / safe_z + intr.cx - 0.5,
                   intr.fy * pc[:, 1] / safe_z + intr.cy - 0.5], axis=-1)
    dist = np.linalg.norm(pc, axis=-1)
    uv[~valid] = 0.0
    dist = np.where(valid, dist, 0.0)
    return uv, dist, valid


def project(intr: CameraIntrinsics, pose: Pose, point):
    """Project one world point.

    Returns ``((u, v), ray_distance)`` or ``None`` when the point is behind
    the camera (camera-frame z <= 1e-9).
    """
    uv, dist, valid = project_points(intr, pose, point)
    if not valid[0]:
        return None
    return (float(uv[0, 0]), float(uv[0, 1])), float(dist[0])


def back_project_pixels(intr: CameraIntrinsics, pose: Pose, u, v, dist) -> np.ndarray:
    """World points at ray distance ``dist`` through pixels (u, v)."""
    dist = np.asarray(dist, dtype=np.float64)
    if np.any(~(dist > 0)):
        raise DomainError("ray distance must be positive")
    origins, dirs = pixel_rays(intr, pose, np.asarray(u), np.asarray(v))
    return origins + dist[..., None] * dirs


def back_project(intr: CameraIntrinsics, pose: Pose, px, ray_distance) -> np.ndarray:
    u, v = px
    return back_project_pixels(intr, pose, np.float64(u), np.float64(v), np.float64(ray_distance))
