"""Offline point-cloud generation and refinement from training depth images.

The cloud is seeded by back-projecting the first view of a strided subset of
training frames. Every following view then gets the accumulated cloud
projected into it; pixels whose ground-truth depth is already explained by
the nearest projected point (within ``tau``) are skipped and all remaining
surface pixels are back-projected as new points.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import geom
from .errors import ConfigError, DomainError

log = logging.getLogger(__name__)


@dataclass(eq=False)
class PointCloud:
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    source_frame: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.colors) != n:
            raise DomainError("colors and positions differ in length")
        self.source_frame = np.asarray(self.source_frame, dtype=np.int64).reshape(-1)
        if len(self.source_frame) != n:
            raise DomainError("source_frame and positions differ in length")
        if not np.all(np.isfinite(self.positions)):
            raise DomainError("point positions must be finite")

    def __len__(self):
        return len(self.positions)

    def concat(self, other: "PointCloud") -> "PointCloud":
        return PointCloud(np.concatenate([self.positions, other.positions]),
                          np.concatenate([self.colors, other.colors]),
                          np.concatenate([self.source_frame, other.source_frame]))


@dataclass(frozen=True)
class RefineConfig:
    tau: float = 0.1
    stride: int = 5

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if int(self.stride) != self.stride or self.stride < 1:
            raise ConfigError(f"stride must be an integer >= 1, got {self.stride}")


def cloud_from_depth(intr, pose, depth, color, frame_index=0) -> PointCloud:
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != intr.shape:
        raise DomainError(f"depth shape {depth.shape} does not match camera {intr.shape}")
    color = np.asarray(color, dtype=np.float64)
    v, u = np.nonzero(depth > 0)
    if len(u) == 0:
        return PointCloud()
    pts = geom.back_project_pixels(intr, pose, u, v, depth[v, u])
    return PointCloud(pts, color[v, u], np.full(len(u), frame_index))


def redundancy_check(d_tilde, d_gt, tau) -> bool:
    """True when a projected distance already explains the ground truth."""
    return bool(abs(d_tilde - d_gt) <= tau)


def zbuffer(intr, pose, points):
    """Rasterize points to their nearest pixel, keeping the closest one.

    Returns ``(dist, index)`` images of shape (height, width); pixels with no
    point hold ``0`` and ``-1``. Ties in distance go to the lowest point index.
    Points behind the camera or off-image are ignored.
    """
    h, w = intr.shape
    dist_img = np.zeros((h, w))
    idx_img = np.full((h, w), -1, dtype=np.int64)
    if len(points) == 0:
        return dist_img, idx_img
    uv, dist, valid = geom.project_points(intr, pose, points)
    # nearest pixel center: pixel u covers [u - 0.5, u + 0.5) in projected coordinates
    col = np.floor(uv[:, 0] + 0.5).astype(np.int64)
    row = np.floor(uv[:, 1] + 0.5).astype(np.int64)
    ok = valid & (col >= 0) & (col < w) & (row >= 0) & (row < h)
    ids = np.nonzero(ok)[0]
    if len(ids) == 0:
        return dist_img, idx_img
    flat = row[ids] * w + col[ids]
    order = np.lexsort((ids, dist[ids], flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    keep = order[first]
    dist_img.reshape(-1)[flat[keep]] = dist[ids[keep]]
    idx_img.reshape(-1)[flat[keep]] = ids[keep]
    return dist_img, idx_img


def refine_view(cloud: PointCloud, intr, pose, depth, color, tau, frame_index=0) -> PointCloud:
    """Steps 2-4 for one view: return only the new points this view adds."""
    depth = np.asarray(depth, dtype=np.float64)
    proj, idx = zbuffer(intr, pose, cloud.positions)
    surface = depth > 0
    redundant = (idx >= 0) & surface & (np.abs(proj - depth) <= tau)
    need = surface & ~redundant
    v, u = np.nonzero(need)
    if len(u) == 0:
        return PointCloud()
    pts = geom.back_project_pixels(intr, pose, u, v, depth[v, u])
    return PointCloud(pts, np.asarray(color, dtype=np.float64)[v, u], np.full(len(u), frame_index))


def subset_indices(n_frames: int, stride: int) -> list[int]:
    return list(range(0, n_frames, stride))


def generate_refined_cloud(dataset, cfg: RefineConfig, history: list | None = None) -> PointCloud:
    """Build the refined cloud from every ``cfg.stride``-th frame of ``dataset``.

    If ``history`` is given, the cloud size after each view is appended to it.
    """
    subset = subset_indices(len(dataset.frames), cfg.stride)
    if len(subset) < 2:
        raise ConfigError(
            f"point-cloud refinement needs >= 2 frames after stride {cfg.stride}, "
            f"dataset has {len(dataset.frames)}")
    intr = dataset.intrinsics
    first = dataset.frames[subset[0]]
    cloud = cloud_from_depth(intr, first.pose, first.depth, first.color, subset[0])
    if history is not None:
        history.append(len(cloud))
    for i in subset[1:]:
        fr = dataset.frames[i]
        new = refine_view(cloud, intr, fr.pose, fr.depth, fr.color, cfg.tau, i)
        cloud = cloud.concat(new)
        log.debug("view %d: +%d points (total %d)", i, len(new), len(cloud))
        if history is not None:
            history.append(len(cloud))
    return cloud
