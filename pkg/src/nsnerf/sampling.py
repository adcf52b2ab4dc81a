"""Sample placement along rays.

Three strategies, all returning positions as ray distances from the camera:

* ``near_surface_samples``: N stratified samples in ``[d - alpha, d + alpha]``
  around a known surface depth ``d``;
* ``full_range_stratified``: N stratified samples over a fixed near/far span,
  optionally stretched by ``range_scale``;
* ``inverse_cdf_resample``: extra samples drawn from the piecewise-constant
  density given by per-bin weights of a coarse sample set.

The batched ``*_batch`` variants work on ``(rays, samples)`` arrays and are
what the trainer uses; the single-ray functions wrap them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError

FAR_DELTA = 1e10
DEFAULT_NEAR_CLIP = 1e-3


@dataclass(frozen=True)
class NearSurfaceConfig:
    alpha: float
    n_samples: int
    near_clip: float = DEFAULT_NEAR_CLIP
    shared_gamma: bool = False

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if int(self.n_samples) != self.n_samples or self.n_samples < 1:
            raise ConfigError(f"n_samples must be an integer >= 1, got {self.n_samples}")
        if not self.near_clip >= 0:
            raise ConfigError(f"near_clip must be >= 0, got {self.near_clip}")


@dataclass(frozen=True)
class FullRangeConfig:
    t_near: float
    t_far: float
    n_samples: int
    range_scale: float = 1.0

    def __post_init__(self):
        if not 0 <= self.t_near < self.t_far:
            raise ConfigError(f"need 0 <= t_near < t_far, got {self.t_near}, {self.t_far}")
        if int(self.n_samples) != self.n_samples or self.n_samples < 1:
            raise ConfigError(f"n_samples must be an integer >= 1, got {self.n_samples}")
        if not self.range_scale >= 1:
            raise ConfigError(f"range_scale must be >= 1, got {self.range_scale}")

    @property
    def t_end(self) -> float:
        return self.t_near + (self.t_far - self.t_near) * self.range_scale


@dataclass(eq=False)
class SampleSet:
    """Ordered samples on one ray.

    ``deltas[i]`` is the gap to the next sample; the last one is ``FAR_DELTA``.
    ``t_end`` closes the last stratification bin ``[positions[-1], t_end)``.
    """

    positions: np.ndarray
    deltas: np.ndarray
    t_end: float

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1)
        self.deltas = np.asarray(self.deltas, dtype=np.float64).reshape(-1)
        if len(self.positions) != len(self.deltas):
            raise DomainError("positions and deltas differ in length")
        if len(self.positions):
            if np.any(np.diff(self.positions) <= 0):
                raise DomainError("sample positions must be strictly ascending")
            if self.positions[0] <= 0:
                raise DomainError("sample positions must be positive")
            if np.any(self.deltas < 0):
                raise DomainError("deltas must be non-negative")

    def __len__(self):
        return len(self.positions)

    @classmethod
    def from_positions(cls, positions, t_end=None) -> "SampleSet":
        positions = np.asarray(positions, dtype=np.float64)
        if t_end is None:
            t_end = float(positions[-1]) if len(positions) else 0.0
        return cls(positions, deltas_from_positions(positions), float(t_end))

    @classmethod
    def empty(cls) -> "SampleSet":
        return cls(np.zeros(0), np.zeros(0), 0.0)

    def bin_edges(self) -> np.ndarray:
        return np.append(self.positions, self.t_end)


def deltas_from_positions(t: np.ndarray) -> np.ndarray:
    """Gaps to the next sample along the last axis, capped with ``FAR_DELTA``."""
    t = np.asarray(t, dtype=np.float64)
    if t.shape[-1] == 0:
        return np.zeros_like(t)
    cap = np.full(t.shape[:-1] + (1,), FAR_DELTA)
    return np.concatenate([np.diff(t, axis=-1), cap], axis=-1)


def _uniform(rng, shape, forced):
    if forced is not None:
        return np.broadcast_to(np.asarray(forced, dtype=np.float64), shape)
    return rng.random(shape)


def near_surface_batch(d, cfg: NearSurfaceConfig, rng, u=None):
    """Near-surface positions for a batch of depths ``d`` (all > 0).

    The interval starts at ``max(d - alpha, near_clip)``; when the clip
    raises it, the bins shrink so the last one still ends at ``d + alpha``.
    ``u`` optionally fixes the unit-interval draws (fraction of a bin, 0 for
    the left edge), shape ``(len(d), N)`` or broadcastable. Returns
    ``(positions, t_end)``.
    """
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    if np.any(~(d > 0)):
        raise DomainError("near-surface sampling needs a positive surface depth")
    n = cfg.n_samples
    lo = np.maximum(d - cfg.alpha, cfg.near_clip)
    hi = d + cfg.alpha
    if np.any(hi <= lo):
        raise DomainError("surface depth lies in front of near_clip")
    width = (hi - lo) / n
    shape = (len(d), 1) if cfg.shared_gamma else (len(d), n)
    gamma = _uniform(rng, shape, u) * width[:, None]
    t = lo[:, None] + np.arange(n) * width[:, None] + gamma
    return t, hi


def near_surface_samples(d, cfg: NearSurfaceConfig, rng, u=None) -> SampleSet:
    t, hi = near_surface_batch([d], cfg, rng, u)
    return SampleSet.from_positions(t[0], hi[0])


def full_range_batch(n_rays: int, cfg: FullRangeConfig, rng, u=None):
    n = cfg.n_samples
    t0 = cfg.t_near
    width = (cfg.t_end - t0) / n
    frac = _uniform(rng, (n_rays, n), u)
    t = t0 + (np.arange(n) + frac) * width
    if t0 == 0:
        # a draw of exactly 0 in the first bin would put a sample on the camera
        t[:, 0] = np.maximum(t[:, 0], 1e-9)
    return t, np.full(n_rays, cfg.t_end)


def full_range_stratified(cfg: FullRangeConfig, rng, u=None) -> SampleSet:
    t, hi = full_range_batch(1, cfg, rng, u)
    return SampleSet.from_positions(t[0], hi[0])


def inverse_cdf_batch(edges, weights, n_fine: int, rng, u=None):
    """Draw ``n_fine`` positions per ray from piecewise-constant densities.

    ``edges`` is ``(R, B + 1)`` bin boundaries, ``weights`` is ``(R, B)``.
    Rays whose weights sum to zero fall back to a flat density. Draws are
    stratified: one uniform per equal slice of [0, 1).
    """
    edges = np.asarray(edges, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if edges.shape[-1] != w.shape[-1] + 1:
        raise DomainError("need exactly one more bin edge than weights")
    if np.any(w < 0):
        raise DomainError("weights must be non-negative")
    r, b = w.shape
    total = w.sum(axis=-1, keepdims=True)
    pdf = np.where(total > 0, w / np.where(total > 0, total, 1.0), 1.0 / b)
    cdf = np.concatenate([np.zeros((r, 1)), np.cumsum(pdf, axis=-1)], axis=-1)
    cdf[:, -1] = 1.0
    frac = _uniform(rng, (r, n_fine), u)
    uu = (np.arange(n_fine) + frac) / n_fine
    # bin index k with cdf[k] <= u < cdf[k+1]; empty bins are never selected
    k = (uu[:, :, None] >= cdf[:, None, :]).sum(axis=-1) - 1
    k = np.clip(k, 0, b - 1)
    c0 = np.take_along_axis(cdf, k, axis=-1)
    c1 = np.take_along_axis(cdf, k + 1, axis=-1)
    e0 = np.take_along_axis(edges, k, axis=-1)
    e1 = np.take_along_axis(edges, k + 1, axis=-1)
    span = c1 - c0
    s = np.where(span > 0, (uu - c0) / np.where(span > 0, span, 1.0), 0.0)
    return e0 + s * (e1 - e0)


def merge_sorted(coarse, fine, tol=1e-12):
    """Sorted union of two position arrays with near-duplicates removed (1-D)."""
    t = np.sort(np.concatenate([coarse, fine]))
    if len(t) == 0:
        return t
    keep = np.ones(len(t), dtype=bool)
    keep[1:] = np.diff(t) > tol
    return t[keep]


def inverse_cdf_resample(coarse: SampleSet, weights, n_fine: int, rng, u=None) -> SampleSet:
    """Coarse samples plus ``n_fine`` draws guided by ``weights``, merged and sorted.

    Bin ``i`` spans ``[positions[i], positions[i+1])``; the last bin ends at
    ``coarse.t_end``.
    """
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(w) != len(coarse):
        raise DomainError(f"got {len(w)} weights for {len(coarse)} coarse samples")
    if len(coarse) == 0 or n_fine == 0:
        return SampleSet.from_positions(coarse.positions.copy(), coarse.t_end)
    fine = inverse_cdf_batch(coarse.bin_edges()[None], w[None], n_fine, rng, u)[0]
    t = merge_sorted(coarse.positions, fine)
    return SampleSet.from_positions(t, coarse.t_end)
