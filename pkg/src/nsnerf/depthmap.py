"""Depth synthesis for novel views: project a saved cloud, then fill surface holes.

A zero pixel of the projected depth is either true background or a gap in
the cloud's coverage of a surface. The local test looks at the ``M x M``
window around the hole: with mean ``mu`` and standard deviation ``sigma`` of
the window, the hole is treated as surface when ``(mu - 0) / sigma > kappa``
and then receives the mean of the nonzero pixels in the window. Holes near
the silhouette see a window that is half empty, which keeps ``mu / sigma``
close to 1 and leaves the background alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError
from .pointcloud import PointCloud, zbuffer

EMPTY, FROM_CLOUD, FILLED = 0, 1, 2
SIGMA_FLOOR = 1e-12


@dataclass(frozen=True)
class HoleFillConfig:
    kappa: float = 2.0
    window: int = 11
    # zeros in the window take part in mu and sigma; False uses nonzero pixels only
    include_zeros: bool = True

    def __post_init__(self):
        if not self.kappa > 0:
            raise ConfigError(f"kappa must be > 0, got {self.kappa}")
        if int(self.window) != self.window or self.window < 3 or self.window % 2 == 0:
            raise ConfigError(f"window must be an odd integer >= 3, got {self.window}")


@dataclass(eq=False)
class ProjectedDepth:
    values: np.ndarray
    provenance: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.provenance = np.asarray(self.provenance, dtype=np.int8)
        if self.values.shape != self.provenance.shape:
            raise DomainError("values and provenance differ in shape")

    @classmethod
    def from_depth(cls, depth) -> "ProjectedDepth":
        depth = np.asarray(depth, dtype=np.float64)
        return cls(depth, np.where(depth > 0, FROM_CLOUD, EMPTY))

    def zero_count(self, region=None) -> int:
        z = self.values == 0
        if region is not None:
            z &= region
        return int(z.sum())


def project_cloud_depth(cloud: PointCloud, intr, pose) -> ProjectedDepth:
    dist, _ = zbuffer(intr, pose, cloud.positions)
    return ProjectedDepth.from_depth(dist)


def _window_bounds(shape, row, col, m):
    h, w = shape
    r = m // 2
    return max(row - r, 0), min(row + r + 1, h), max(col - r, 0), min(col + r + 1, w)


def min_support(area: int) -> int:
    return math.ceil(area / 4)


def _decide(mu, sigma, count, area, kappa):
    support = count >= np.ceil(area / 4)
    flat = sigma < SIGMA_FLOOR
    with np.errstate(divide="ignore", invalid="ignore"):
        score = np.where(flat, 0.0, mu / np.where(flat, 1.0, sigma))
    return support & np.where(flat, mu > 0, score > kappa)


def classify_hole(depth: ProjectedDepth, px, cfg: HoleFillConfig) -> bool:
    """Whether the hole at ``px = (u, v)`` is missing surface (True) or background."""
    u, v = px
    vals = depth.values
    if vals[v, u] != 0:
        raise DomainError(f"pixel ({u}, {v}) is not a hole")
    r0, r1, c0, c1 = _window_bounds(vals.shape, v, u, cfg.window)
    win = vals[r0:r1, c0:c1]
    area = win.size
    nz = win[win > 0]
    if len(nz) == 0:
        return False
    sample = win if cfg.include_zeros else nz
    return bool(_decide(sample.mean(), sample.std(), len(nz), area, cfg.kappa))


def _box_sum(a, m):
    """Sum of ``a`` over the ``m x m`` window around each pixel, clamped to the image."""
    h, w = a.shape
    r = m // 2
    s = np.zeros((h + 1, w + 1))
    s[1:, 1:] = np.cumsum(np.cumsum(a, axis=0), axis=1)
    rows = np.arange(h)
    cols = np.arange(w)
    r0 = np.clip(rows - r, 0, h)[:, None]
    r1 = np.clip(rows + r + 1, 0, h)[:, None]
    c0 = np.clip(cols - r, 0, w)[None, :]
    c1 = np.clip(cols + r + 1, 0, w)[None, :]
    return s[r1, c1] - s[r0, c1] - s[r1, c0] + s[r0, c0]


def hole_mask(depth: ProjectedDepth, cfg: HoleFillConfig):
    """Classify every hole at once. Returns ``(is_surface_hole, fill_value)``."""
    vals = depth.values
    nonzero = (vals > 0).astype(np.float64)
    area = _box_sum(np.ones_like(vals), cfg.window)
    count = _box_sum(nonzero, cfg.window)
    total = _box_sum(vals, cfg.window)
    total_sq = _box_sum(vals * vals, cfg.window)
    n = area if cfg.include_zeros else np.maximum(count, 1)
    mu = total / n
    sigma = np.sqrt(np.maximum(total_sq / n - mu * mu, 0.0))
    surface = (vals == 0) & (count > 0) & _decide(mu, sigma, count, area, cfg.kappa)
    fill = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    return surface, fill


def fill_holes(depth: ProjectedDepth, cfg: HoleFillConfig) -> ProjectedDepth:
    """Single pass: statistics come from the unfilled input, no cascading."""
    surface, fill = hole_mask(depth, cfg)
    values = np.where(surface, fill, depth.values)
    prov = np.where(surface, FILLED, depth.provenance).astype(np.int8)
    return ProjectedDepth(values, prov)


def estimate_depth(cloud: PointCloud, intr, pose, cfg: HoleFillConfig | None = None) -> ProjectedDepth:
    """Projection followed by hole filling; ``cfg=None`` skips the fill."""
    proj = project_cloud_depth(cloud, intr, pose)
    return proj if cfg is None else fill_holes(proj, cfg)
