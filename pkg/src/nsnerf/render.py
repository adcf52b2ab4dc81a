"""Emission-absorption compositing, ray rendering, MSE loss and masked PSNR."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError
from .field import FieldParams, field_backward, field_forward
from .sampling import SampleSet, deltas_from_positions

PSNR_IDENTICAL = math.inf


@dataclass(frozen=True)
class RenderConfig:
    background_color: tuple = (0.0, 0.0, 0.0)
    white_background: bool = False
    sigma_scale: float = 1.0

    def __post_init__(self):
        if len(self.background_color) != 3 or not all(0 <= c <= 1 for c in self.background_color):
            raise ConfigError("background_color must be an RGB triple in [0, 1]")
        if not self.sigma_scale > 0:
            raise ConfigError(f"sigma_scale must be > 0, got {self.sigma_scale}")

    @property
    def background(self) -> np.ndarray:
        return np.ones(3) if self.white_background else np.asarray(self.background_color, dtype=np.float64)


def composite_batch(sigmas, rgbs, deltas, cfg: RenderConfig = RenderConfig()):
    """Composite ``(R, N)`` densities and ``(R, N, 3)`` colors front to back.

    Returns ``(pixels (R, 3), weights (R, N), acc (R,), cache)``; ``cache``
    feeds ``composite_backward``.
    """
    # float64 throughout: float32 transmittances underflow into slow subnormals
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if np.any(sigmas < 0):
        raise DomainError("densities must be non-negative")
    rgbs = np.asarray(rgbs, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if sigmas.shape != deltas.shape or rgbs.shape != sigmas.shape + (3,):
        raise DomainError(f"shape mismatch: sigmas {sigmas.shape}, deltas {deltas.shape}, rgbs {rgbs.shape}")
    tau = cfg.sigma_scale * sigmas * deltas
    # optical depth in front of each sample, then one past the last
    before = np.concatenate([np.zeros_like(tau[:, :1]), np.cumsum(tau, axis=-1)], axis=-1)
    trans = np.exp(-before)  # (R, N + 1); trans[:, -1] is the residual transmittance
    weights = trans[:, :-1] - trans[:, 1:]
    bg = cfg.background
    residual = trans[:, -1]
    pixels = np.einsum("rn,rnc->rc", weights, rgbs) + residual[:, None] * bg
    acc = weights.sum(axis=-1)
    cache = {"trans": trans, "weights": weights, "rgbs": rgbs, "deltas": deltas, "bg": bg}
    return pixels, weights, acc, cache


def composite_backward(cache, d_pixels, cfg: RenderConfig = RenderConfig()):
    """Gradients ``(d_sigmas, d_rgbs)`` of a loss given ``d_pixels`` (R, 3)."""
    trans = cache["trans"]
    rgbs = cache["rgbs"]
    d_rgbs = cache["weights"][:, :, None] * d_pixels[:, None, :]
    # a[k] = dL/dpixel . color_k, with the background as color N+1
    a = np.concatenate([np.einsum("rc,rnc->rn", d_pixels, rgbs),
                        (d_pixels @ cache["bg"])[:, None]], axis=-1)
    # dL/dE_k for transmittances E_2..E_{N+1}
    d_e = (a[:, 1:] - a[:, :-1]) * trans[:, 1:]
    # dL/dtau_j = -sum_{k > j} dL/dE_k * E_k
    d_tau = -np.cumsum(d_e[:, ::-1], axis=-1)[:, ::-1]
    d_sigmas = d_tau * cfg.sigma_scale * cache["deltas"]
    return d_sigmas, d_rgbs


def composite(samples: SampleSet, sigmas, rgbs, cfg: RenderConfig = RenderConfig()):
    """Single-ray compositing: ``(pixel (3,), weights (N,), acc)``."""
    sigmas = np.asarray(sigmas, dtype=np.float64).reshape(1, -1)
    rgbs = np.asarray(rgbs, dtype=np.float64).reshape(1, -1, 3)
    if sigmas.shape[1] != len(samples):
        raise DomainError(f"{sigmas.shape[1]} densities for {len(samples)} samples")
    pixel, weights, acc, _ = composite_batch(sigmas, rgbs, samples.deltas[None], cfg)
    return pixel[0], weights[0], float(acc[0])


def _query(field, pts, dirs):
    if isinstance(field, FieldParams):
        return field_forward(field, pts, dirs if field.config.use_viewdirs else None)
    return field(pts, dirs)


def render_ray(field, ray, samples: SampleSet, cfg: RenderConfig = RenderConfig()) -> np.ndarray:
    """Render one ray. ``field`` is ``FieldParams`` or ``f(points, dirs) -> (sigma, rgb)``."""
    if len(samples) == 0:
        return cfg.background.copy()
    pts = ray.origin + samples.positions[:, None] * ray.direction
    dirs = np.broadcast_to(ray.direction, pts.shape)
    sigma, rgb = _query(field, pts, dirs)
    pixel, _, _ = composite(samples, sigma, rgb, cfg)
    return pixel


def render_batch(params: FieldParams, origins, dirs, t, cfg: RenderConfig = RenderConfig(),
                 need_grad: bool = False):
    """Render ``R`` rays with sample distances ``t`` (R, N).

    Returns ``(pixels, weights, state)``; pass ``state`` to
    ``render_batch_backward`` when ``need_grad`` is set.
    """
    dt = params.vector.dtype
    r, n = t.shape
    origins = np.asarray(origins, dtype=dt)
    dirs = np.asarray(dirs, dtype=dt)
    t = np.asarray(t, dtype=dt)
    pts = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
    vdirs = np.broadcast_to(dirs[:, None, :], pts.shape).reshape(-1, 3)
    out = field_forward(params, pts.reshape(-1, 3),
                        vdirs if params.config.use_viewdirs else None, return_cache=need_grad)
    sigma, rgb = out[0].reshape(r, n), out[1].reshape(r, n, 3)
    deltas = deltas_from_positions(t)
    pixels, weights, _, ccache = composite_batch(sigma, rgb, deltas, cfg)
    state = (out[2], ccache) if need_grad else None
    return pixels, weights, state


def render_batch_backward(params: FieldParams, state, d_pixels, cfg: RenderConfig = RenderConfig()):
    fcache, ccache = state
    d_sigma, d_rgb = composite_backward(ccache, np.asarray(d_pixels, dtype=np.float64), cfg)
    dt = params.vector.dtype
    if dt == np.float32:
        # products of tiny output gradients turn into float32 subnormals inside the
        # backward pass and slow every matmul; such gradients are below float32 resolution anyway
        tiny = 1e-15
        d_sigma = np.where(np.abs(d_sigma) < tiny, 0.0, d_sigma)
        d_rgb = np.where(np.abs(d_rgb) < tiny, 0.0, d_rgb)
    return field_backward(params, fcache, d_sigma.reshape(-1).astype(dt), d_rgb.reshape(-1, 3).astype(dt))


def mse_loss(pred, target):
    """Mean squared error over all channels and its gradient w.r.t. ``pred``."""
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


def psnr(rendered, gt, mask=None) -> float:
    """PSNR in dB for unit-range images, excluding pixels where ``mask`` is true.

    Identical images give ``math.inf``.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if rendered.shape != gt.shape:
        raise DomainError(f"image shapes differ: {rendered.shape} vs {gt.shape}")
    err = (rendered - gt) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != gt.shape[:2]:
            raise DomainError(f"mask shape {mask.shape} does not match image {gt.shape[:2]}")
        keep = ~mask
        if not keep.any():
            raise DomainError("foreground mask is empty")
        err = err[keep]
    mse = float(np.mean(err))
    if mse == 0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / mse)
