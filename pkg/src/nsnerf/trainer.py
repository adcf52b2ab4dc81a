"""Training, evaluation and comparison sweeps.

The three stages mirror the pipeline: train one radiance field with
depth-guided (or full-range) samples, build a refined point cloud offline,
and evaluate novel views using either ground-truth depth or depth estimated
from that cloud.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import geom
from .dataio import Dataset
from .depthmap import HoleFillConfig, estimate_depth
from .errors import ConfigError, NumericError
from .field import AdamState, EncodingConfig, FieldConfig, FieldParams, adam_step, init_params
from .pointcloud import PointCloud
from .render import RenderConfig, mse_loss, psnr, render_batch, render_batch_backward
from .sampling import (FullRangeConfig, NearSurfaceConfig, full_range_batch, inverse_cdf_batch,
                       near_surface_batch)

log = logging.getLogger(__name__)

SAMPLERS = ("near_surface", "full_range", "hierarchical_baseline")
DEPTH_SOURCES = ("gt", "cloud")
DEFAULT_NEAR, DEFAULT_FAR = 2.0, 6.0


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3000
    batch_rays: int = 512
    lr: float = 5e-4
    lr_drop_fraction: float = 0.625
    lr_drop_factor: float = 0.1
    sampler: str = "near_surface"
    alpha: float = 0.5
    n_samples: int = 32
    near_clip: float = 1e-3
    shared_gamma: bool = False
    t_near: float | None = None
    t_far: float | None = None
    range_scale: float = 1.0
    skip_background_rays: bool = False
    l_pos: int = 10
    l_dir: int = 4
    width: int = 64
    depth: int = 4
    use_viewdirs: bool = False
    white_background: bool = False
    dtype: str = "float32"
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ConfigError(f"iterations must be an integer >= 1, got {self.iterations}")
        if int(self.batch_rays) != self.batch_rays or self.batch_rays < 1:
            raise ConfigError(f"batch_rays must be an integer >= 1, got {self.batch_rays}")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.sampler == "near_surface" and not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0 for near_surface sampling, got {self.alpha}")
        if int(self.n_samples) != self.n_samples or self.n_samples < 1:
            raise ConfigError(f"n_samples must be an integer >= 1, got {self.n_samples}")
        if self.sampler == "hierarchical_baseline" and self.n_samples < 2:
            raise ConfigError("hierarchical_baseline needs n_samples >= 2")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0 < self.lr_drop_fraction <= 1:
            raise ConfigError("lr_drop_fraction must lie in (0, 1]")
        if not self.lr_drop_factor > 0:
            raise ConfigError("lr_drop_factor must be > 0")
        if not self.range_scale >= 1:
            raise ConfigError(f"range_scale must be >= 1, got {self.range_scale}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown training option(s): {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())

    @property
    def drop_step(self) -> int:
        return int(round(self.iterations * self.lr_drop_fraction))


def stable_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(blob).hexdigest()[:12]


def dataset_hash(ds: Dataset) -> str:
    h = hashlib.sha1()
    h.update(json.dumps(ds.intrinsics.to_dict(), sort_keys=True).encode())
    for fr in ds.frames:
        h.update(fr.pose.as_matrix().tobytes())
        h.update(np.ascontiguousarray(fr.color).tobytes())
        if fr.depth is not None:
            h.update(np.ascontiguousarray(fr.depth).tobytes())
    return h.hexdigest()[:12]


def scene_bounds(ds: Dataset) -> np.ndarray:
    """Object bounding box: from the manifest, else from back-projected depth."""
    if ds.scene_bbox is not None:
        return np.asarray(ds.scene_bbox, dtype=np.float64)
    pts = []
    if ds.has_depth:
        for fr in ds.frames:
            v, u = np.nonzero(fr.depth > 0)
            if len(u):
                pts.append(geom.back_project_pixels(ds.intrinsics, fr.pose, u, v, fr.depth[v, u]))
    if not pts:
        return np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
    pts = np.concatenate(pts)
    return np.stack([pts.min(0), pts.max(0)])


def ray_span(ds: Dataset, cfg: TrainConfig) -> tuple[float, float]:
    near = cfg.t_near if cfg.t_near is not None else (ds.near if ds.near is not None else DEFAULT_NEAR)
    far = cfg.t_far if cfg.t_far is not None else (ds.far if ds.far is not None else DEFAULT_FAR)
    if not 0 <= near < far:
        raise ConfigError(f"need 0 <= t_near < t_far, got {near}, {far}")
    return float(near), float(far)


def field_config(ds: Dataset, cfg: TrainConfig) -> FieldConfig:
    return FieldConfig.for_bbox(scene_bounds(ds), encoding=EncodingConfig(cfg.l_pos, cfg.l_dir),
                                width=cfg.width, depth=cfg.depth, use_viewdirs=cfg.use_viewdirs)


class RaySampler:
    """Sample distances for a batch of rays under one TrainConfig."""

    def __init__(self, cfg: TrainConfig, near: float, far: float):
        self.cfg = cfg
        n = cfg.n_samples
        # depth-less rays of the near-surface sampler use the unscaled full range
        self.fallback = FullRangeConfig(near, far, n, 1.0)
        if cfg.sampler == "near_surface":
            self.near_surface = NearSurfaceConfig(cfg.alpha, n, cfg.near_clip, cfg.shared_gamma)
        elif cfg.sampler == "full_range":
            self.full = FullRangeConfig(near, far, n, cfg.range_scale)
        else:
            self.coarse = FullRangeConfig(near, far, n // 2, cfg.range_scale)

    def __call__(self, rng, depths, params=None, origins=None, dirs=None, render_cfg=None):
        r = len(depths)
        cfg = self.cfg
        if cfg.sampler == "near_surface":
            t, _ = full_range_batch(r, self.fallback, rng)
            has = depths > 0
            if has.any():
                t[has], _ = near_surface_batch(depths[has], self.near_surface, rng)
            return t
        if cfg.sampler == "full_range":
            return full_range_batch(r, self.full, rng)[0]
        coarse, t_end = full_range_batch(r, self.coarse, rng)
        _, weights, _ = render_batch(params, origins, dirs, coarse, render_cfg)
        edges = np.concatenate([coarse, t_end[:, None]], axis=-1)
        fine = inverse_cdf_batch(edges, weights.astype(np.float64), cfg.n_samples - cfg.n_samples // 2, rng)
        return np.sort(np.concatenate([coarse, fine], axis=-1), axis=-1)


def _stack_rays(ds: Dataset):
    origins, dirs, colors, depths = [], [], [], []
    for fr in ds.frames:
        o, d = geom.pixel_rays(ds.intrinsics, fr.pose)
        origins.append(o.reshape(-1, 3))
        dirs.append(d.reshape(-1, 3))
        colors.append(fr.color.reshape(-1, 3))
        depths.append(np.zeros(o.shape[0] * o.shape[1]) if fr.depth is None else fr.depth.reshape(-1))
    return (np.concatenate(origins), np.concatenate(dirs), np.concatenate(colors),
            np.concatenate(depths))


def train(ds: Dataset, cfg: TrainConfig, progress=None):
    """Fit a radiance field to ``ds``. Returns ``(params, loss_log)``.

    ``loss_log`` is a list of ``(iteration, loss)``: iteration 1, every
    ``cfg.log_every`` iterations, and the last one.
    """
    if cfg.sampler == "near_surface" and not ds.has_depth:
        raise ConfigError("near_surface training needs a depth image for every training frame")
    if not ds.frames:
        raise ConfigError("training set is empty")
    near, far = ray_span(ds, cfg)
    dtype = np.dtype(cfg.dtype)
    params = init_params(field_config(ds, cfg), cfg.seed, dtype)
    adam = AdamState.for_params(params, lr=cfg.lr, drop_step=cfg.drop_step,
                                lr_dropped=cfg.lr * cfg.lr_drop_factor)
    render_cfg = RenderConfig(white_background=cfg.white_background)
    sampler = RaySampler(cfg, near, far)
    origins, dirs, colors, depths = _stack_rays(ds)
    pool = np.arange(len(origins))
    if cfg.skip_background_rays and cfg.sampler == "near_surface":
        pool = pool[depths > 0]
    loss_log = []
    for it in range(1, cfg.iterations + 1):
        rng = np.random.default_rng([cfg.seed, it])
        idx = pool[rng.integers(0, len(pool), cfg.batch_rays)]
        t = sampler(rng, depths[idx], params, origins[idx], dirs[idx], render_cfg)
        pixels, _, state = render_batch(params, origins[idx], dirs[idx], t, render_cfg, need_grad=True)
        loss, d_pix = mse_loss(pixels, colors[idx].astype(dtype))
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at iteration {it}")
        grads = render_batch_backward(params, state, d_pix.astype(dtype), render_cfg)
        adam_step(adam, params, grads)
        if it == 1 or it % cfg.log_every == 0 or it == cfg.iterations:
            loss_log.append((it, loss))
            log.info("iter %d loss %.6f lr %.2e", it, loss, adam.current_lr())
            if progress is not None:
                progress(it, loss)
    return params, loss_log


# --------------------------------------------------------------------------
# evaluation


@dataclass(eq=False)
class ViewResult:
    index: int
    psnr: float
    image: np.ndarray
    depth: np.ndarray | None = None


def render_view(params: FieldParams, intr, pose, depth, cfg: TrainConfig, near: float, far: float,
                rng, chunk: int = 2048) -> np.ndarray:
    """Render every pixel of one view; ``depth`` drives near-surface sampling."""
    origins, dirs = geom.pixel_rays(intr, pose)
    origins = origins.reshape(-1, 3)
    dirs = dirs.reshape(-1, 3)
    depth = np.zeros(len(origins)) if depth is None else np.asarray(depth).reshape(-1)
    render_cfg = RenderConfig(white_background=cfg.white_background)
    sampler = RaySampler(cfg, near, far)
    out = np.zeros((len(origins), 3))
    for s in range(0, len(origins), chunk):
        sl = slice(s, s + chunk)
        t = sampler(rng, depth[sl], params, origins[sl], dirs[sl], render_cfg)
        out[sl], _, _ = render_batch(params, origins[sl], dirs[sl], t, render_cfg)
    return np.clip(out.reshape(intr.shape + (3,)), 0.0, 1.0)


def evaluate(params: FieldParams, test: Dataset, cloud: PointCloud | None, cfg: TrainConfig,
             depth_source: str = "cloud", hole_cfg: HoleFillConfig | None = HoleFillConfig()):
    """Render every test view and score it with background-masked PSNR.

    ``depth_source`` selects the depth that guides near-surface sampling:
    ``"gt"`` uses the test frames' own depth, ``"cloud"`` projects ``cloud``
    and fills holes with ``hole_cfg`` (``None`` disables filling). The
    background mask always comes from ground-truth depth when present.
    """
    if depth_source not in DEPTH_SOURCES:
        raise ConfigError(f"depth_source must be one of {DEPTH_SOURCES}, got {depth_source!r}")
    needs_depth = cfg.sampler == "near_surface"
    if needs_depth and depth_source == "gt" and not test.has_depth:
        raise ConfigError("depth_source 'gt' needs depth images in the test set")
    if needs_depth and depth_source == "cloud" and cloud is None:
        raise ConfigError("depth_source 'cloud' needs a point cloud")
    near, far = ray_span(test, cfg)
    results = []
    for i, fr in enumerate(test.frames):
        depth = None
        if needs_depth:
            if depth_source == "gt":
                depth = fr.depth
            else:
                depth = estimate_depth(cloud, test.intrinsics, fr.pose, hole_cfg).values
        rng = np.random.default_rng([cfg.seed, 7919, i])
        img = render_view(params, test.intrinsics, fr.pose, depth, cfg, near, far, rng)
        score = psnr(img, fr.color, fr.background_mask)
        results.append(ViewResult(i, score, img, depth))
    return results


@dataclass
class ExperimentReport:
    """One row per configuration; mean and per-view masked PSNR per depth source."""

    rows: list = field(default_factory=list)
    dataset_hash: str = ""
    wall_clock_seconds: float = 0.0

    def add_row(self, config_id: str, cfg: TrainConfig, psnr_by_source: dict, extra=None):
        row = {"config_id": config_id, "config_hash": cfg.config_hash(), "config": cfg.to_dict()}
        for src, per_view in psnr_by_source.items():
            row[f"psnr_{src}"] = float(np.mean(per_view))
            row[f"psnr_{src}_per_view"] = [float(x) for x in per_view]
        if extra:
            row.update(extra)
        self.rows.append(row)
        return row

    def table(self, source: str = "gt") -> dict:
        return {r["config_id"]: r.get(f"psnr_{source}") for r in self.rows}

    def to_dict(self) -> dict:
        """Deterministic content only; wall-clock time is written separately."""
        return {"dataset_hash": self.dataset_hash, "rows": self.rows,
                "report_hash": stable_hash(self.rows)}


def run_experiment(train_ds: Dataset, test_ds: Dataset, cfg: TrainConfig, cloud=None,
                   depth_sources=("gt",), hole_cfg=HoleFillConfig(), config_id=None,
                   report: ExperimentReport | None = None):
    """Train once, evaluate under each depth source, append a row to ``report``."""
    report = report if report is not None else ExperimentReport(dataset_hash=dataset_hash(train_ds))
    t0 = time.perf_counter()
    params, loss_log = train(train_ds, cfg)
    scores = {}
    for src in depth_sources:
        res = evaluate(params, test_ds, cloud, cfg, src, hole_cfg)
        scores[src] = [r.psnr for r in res]
    report.add_row(config_id or cfg.config_hash(), cfg, scores,
                   {"final_loss": float(loss_log[-1][1])})
    report.wall_clock_seconds += time.perf_counter() - t0
    return params, report


SWEEP_AXES = {"alpha": float, "n_samples": int, "range_scale": float, "sampler": str}


def sweep(train_ds: Dataset, test_ds: Dataset, base: TrainConfig, axis: str, values,
          cloud=None, depth_sources=("gt",), hole_cfg=HoleFillConfig()) -> ExperimentReport:
    """Train and evaluate one configuration per value of ``axis``."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    cfgs = [base.replace(**{axis: SWEEP_AXES[axis](v)}) for v in values]
    report = ExperimentReport(dataset_hash=dataset_hash(train_ds))
    for v, c in zip(values, cfgs):
        run_experiment(train_ds, test_ds, c, cloud, depth_sources, hole_cfg,
                       config_id=f"{axis}={v}", report=report)
    return report
