"""Positional encoding, the radiance-field MLP with hand-written backprop, and ADAM.

Architecture (defaults): encoded position -> 4 ReLU layers of width 64, with
the encoded position concatenated again at the input of the third layer ->
linear density head (softplus) and color head (sigmoid). With
``use_viewdirs`` the color head instead sees a 64-wide feature layer
concatenated with the encoded view direction through one ReLU layer of
width 32.

All weights live in one flat vector so the optimizer, gradient checks and
checkpoint files can treat them uniformly. ``FieldParams.layout`` gives each
block's name, shape and offset in that vector; matrices are row-major with
shape ``(fan_in, fan_out)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DomainError, NumericError


@dataclass(frozen=True)
class EncodingConfig:
    l_pos: int = 10
    l_dir: int = 4
    include_input: bool = True

    def __post_init__(self):
        if self.l_pos < 0 or self.l_dir < 0:
            raise ConfigError("frequency counts must be >= 0")

    def dim(self, n_freq: int) -> int:
        return 3 * (int(self.include_input) + 2 * n_freq)


def encode(x, n_freq: int, include_input: bool = True) -> np.ndarray:
    """``[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(...)]`` along the last axis."""
    x = np.asarray(x)
    parts = [x] if include_input else []
    for k in range(n_freq):
        a = (2.0 ** k * np.pi) * x
        parts.append(np.sin(a))
        parts.append(np.cos(a))
    if not parts:
        return np.zeros(x.shape[:-1] + (0,), dtype=x.dtype)
    return np.concatenate(parts, axis=-1)


@dataclass(frozen=True)
class FieldConfig:
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    width: int = 64
    depth: int = 4
    skip_layer: int = 2  # zero-based hidden layer that also receives the encoded input
    use_viewdirs: bool = False
    dir_width: int = 32
    # world-space box mapped to [-1, 1]^3 before encoding: (center, half extent)
    center: tuple = (0.0, 0.0, 0.0)
    half_extent: float = 1.0

    def __post_init__(self):
        if self.width < 1 or self.depth < 1:
            raise ConfigError("width and depth must be >= 1")
        if not self.half_extent > 0:
            raise ConfigError("half_extent must be > 0")

    @property
    def pos_dim(self) -> int:
        return self.encoding.dim(self.encoding.l_pos)

    @property
    def dir_dim(self) -> int:
        return self.encoding.dim(self.encoding.l_dir)

    def layer_shapes(self) -> list[tuple[str, tuple[int, int]]]:
        shapes = []
        fan_in = self.pos_dim
        for i in range(self.depth):
            if i == self.skip_layer and i > 0:
                fan_in += self.pos_dim
            shapes.append((f"hidden{i}", (fan_in, self.width)))
            fan_in = self.width
        shapes.append(("sigma", (self.width, 1)))
        if self.use_viewdirs:
            shapes.append(("feature", (self.width, self.width)))
            shapes.append(("dir", (self.width + self.dir_dim, self.dir_width)))
            shapes.append(("rgb", (self.dir_width, 3)))
        else:
            shapes.append(("rgb", (self.width, 3)))
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["center"] = list(self.center)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        d = dict(d)
        try:
            enc = EncodingConfig(**d.pop("encoding", {}))
            if "center" in d:
                d["center"] = tuple(d["center"])
            return cls(encoding=enc, **d)
        except TypeError as e:
            raise ConfigError(f"bad field config: {e}") from e

    @classmethod
    def for_bbox(cls, bbox, margin: float = 1.1, **kw) -> "FieldConfig":
        bbox = np.asarray(bbox, dtype=np.float64)
        center = 0.5 * (bbox[0] + bbox[1])
        half = 0.5 * float(np.max(bbox[1] - bbox[0])) * margin
        return cls(center=tuple(float(c) for c in center), half_extent=half, **kw)


@dataclass(eq=False)
class FieldParams:
    config: FieldConfig
    vector: np.ndarray

    def __post_init__(self):
        n = n_params(self.config)
        if self.vector.shape != (n,):
            raise DomainError(f"parameter vector has shape {self.vector.shape}, expected ({n},)")

    @property
    def layout(self) -> list[dict]:
        return param_layout(self.config)

    def blocks(self, vec=None) -> dict[str, np.ndarray]:
        """Name -> reshaped view into ``vec`` (the parameters by default)."""
        vec = self.vector if vec is None else vec
        return {b["name"]: vec[b["offset"]:b["offset"] + b["size"]].reshape(b["shape"])
                for b in self.layout}

    def copy(self) -> "FieldParams":
        return FieldParams(self.config, self.vector.copy())


def param_layout(cfg: FieldConfig) -> list[dict]:
    out = []
    off = 0
    for name, (fi, fo) in cfg.layer_shapes():
        out.append({"name": f"{name}.W", "shape": [fi, fo], "offset": off, "size": fi * fo})
        off += fi * fo
        out.append({"name": f"{name}.b", "shape": [fo], "offset": off, "size": fo})
        off += fo
    return out


def n_params(cfg: FieldConfig) -> int:
    return sum(fi * fo + fo for _, (fi, fo) in cfg.layer_shapes())


def init_params(cfg: FieldConfig, seed: int = 0, dtype=np.float64) -> FieldParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    p = FieldParams(cfg, np.zeros(n_params(cfg), dtype=dtype))
    for name, blk in p.blocks().items():
        if name.endswith(".W"):
            fi, fo = blk.shape
            lim = np.sqrt(6.0 / (fi + fo))
            blk[...] = rng.uniform(-lim, lim, size=blk.shape)
    return p


def zero_params(cfg: FieldConfig, dtype=np.float64) -> FieldParams:
    return FieldParams(cfg, np.zeros(n_params(cfg), dtype=dtype))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def field_forward(params: FieldParams, pos, dirs=None, return_cache=False):
    """Density and color at world positions ``pos`` (N, 3).

    ``dirs`` (N, 3) unit view directions are required when the config uses
    view directions and ignored otherwise. Computation runs in the dtype of
    the parameter vector.
    """
    cfg = params.config
    dt = params.vector.dtype
    pos = np.asarray(pos, dtype=dt).reshape(-1, 3)
    blk = params.blocks()
    x = (pos - np.asarray(cfg.center, dtype=dt)) / dt.type(cfg.half_extent)
    enc = encode(x, cfg.encoding.l_pos, cfg.encoding.include_input)
    acts = []  # (layer input, pre-activation) per hidden layer
    h = enc
    for i in range(cfg.depth):
        if i == cfg.skip_layer and i > 0:
            h = np.concatenate([h, enc], axis=-1)
        z = h @ blk[f"hidden{i}.W"] + blk[f"hidden{i}.b"]
        acts.append((h, z))
        h = np.maximum(z, 0)
    sigma_raw = (h @ blk["sigma.W"] + blk["sigma.b"])[:, 0]
    sigma = np.logaddexp(0, sigma_raw).astype(dt, copy=False)
    cache = {"enc": enc, "acts": acts, "top": h, "sigma_raw": sigma_raw}
    if cfg.use_viewdirs:
        if dirs is None:
            raise DomainError("this field needs view directions")
        d = np.asarray(dirs, dtype=dt).reshape(-1, 3)
        denc = encode(d, cfg.encoding.l_dir, cfg.encoding.include_input)
        feat = h @ blk["feature.W"] + blk["feature.b"]
        hd_in = np.concatenate([feat, denc], axis=-1)
        zd = hd_in @ blk["dir.W"] + blk["dir.b"]
        hd = np.maximum(zd, 0)
        rgb_raw = hd @ blk["rgb.W"] + blk["rgb.b"]
        cache.update(hd_in=hd_in, zd=zd, hd=hd)
    else:
        rgb_raw = h @ blk["rgb.W"] + blk["rgb.b"]
    rgb = _sigmoid(rgb_raw)
    cache["rgb"] = rgb
    if return_cache:
        return sigma, rgb, cache
    return sigma, rgb


def field_backward(params: FieldParams, cache, d_sigma, d_rgb) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the flat parameter vector.

    ``d_sigma`` (N,) and ``d_rgb`` (N, 3) are the loss gradients w.r.t. the
    outputs of the matching ``field_forward(..., return_cache=True)`` call.
    """
    cfg = params.config
    grad = np.zeros_like(params.vector)
    g = params.blocks(grad)
    blk = params.blocks()
    rgb = cache["rgb"]
    d_rgb_raw = d_rgb * rgb * (1.0 - rgb)
    d_sigma_raw = (d_sigma * _sigmoid(cache["sigma_raw"]))[:, None]
    h = cache["top"]
    if cfg.use_viewdirs:
        hd = cache["hd"]
        g["rgb.W"][...] = hd.T @ d_rgb_raw
        g["rgb.b"][...] = d_rgb_raw.sum(0)
        d_zd = (d_rgb_raw @ blk["rgb.W"].T) * (cache["zd"] > 0)
        g["dir.W"][...] = cache["hd_in"].T @ d_zd
        g["dir.b"][...] = d_zd.sum(0)
        d_feat = (d_zd @ blk["dir.W"].T)[:, :cfg.width]
        g["feature.W"][...] = h.T @ d_feat
        g["feature.b"][...] = d_feat.sum(0)
        dh = d_feat @ blk["feature.W"].T
    else:
        g["rgb.W"][...] = h.T @ d_rgb_raw
        g["rgb.b"][...] = d_rgb_raw.sum(0)
        dh = d_rgb_raw @ blk["rgb.W"].T
    g["sigma.W"][...] = h.T @ d_sigma_raw
    g["sigma.b"][...] = d_sigma_raw.sum(0)
    dh = dh + d_sigma_raw @ blk["sigma.W"].T
    for i in reversed(range(cfg.depth)):
        h_in, z = cache["acts"][i]
        dz = dh * (z > 0)
        g[f"hidden{i}.W"][...] = h_in.T @ dz
        g[f"hidden{i}.b"][...] = dz.sum(0)
        if i == 0:
            break
        dh = dz @ blk[f"hidden{i}.W"].T
        if i == cfg.skip_layer:
            dh = dh[:, :cfg.width]
    return grad


# --------------------------------------------------------------------------
# optimizer


@dataclass(eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 5e-4
    drop_step: int | None = None
    lr_dropped: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: FieldParams, **kw) -> "AdamState":
        # float64 moments: squared float32 gradients underflow into subnormals
        n = len(params.vector)
        return cls(np.zeros(n), np.zeros(n), **kw)

    def current_lr(self) -> float:
        """Learning rate that the next step will use."""
        if self.drop_step is not None and self.step >= self.drop_step:
            return self.lr_dropped
        return self.lr


def adam_step(state: AdamState, params: FieldParams, grads: np.ndarray):
    """One in-place ADAM update; returns ``(params, state)`` for convenience."""
    if grads.shape != params.vector.shape:
        raise DomainError(f"gradient shape {grads.shape} != parameter shape {params.vector.shape}")
    if not np.all(np.isfinite(grads)):
        bad = [b["name"] for b in params.layout
               if not np.all(np.isfinite(grads[b["offset"]:b["offset"] + b["size"]]))]
        raise NumericError(f"non-finite gradient in parameter block(s): {', '.join(bad)}")
    lr = state.current_lr()
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * grads
    state.v *= b2
    state.v += (1 - b2) * grads * grads
    m_hat = state.m / (1 - b1 ** t)
    v_hat = state.v / (1 - b2 ** t)
    params.vector -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(params.vector.dtype)
    return params, state


# --------------------------------------------------------------------------
# checkpoints: <stem>.bin = little-endian float32 vector, <stem>.json = sidecar


def save_checkpoint(params: FieldParams, path, step: int = 0, lr: float = 0.0, extra=None):
    """Write ``path`` (raw ``<f4`` parameters) and ``path.with_suffix('.json')``."""
    path = Path(path)
    path.write_bytes(params.vector.astype("<f4").tobytes())
    side = {"format": "float32-le", "n_params": int(len(params.vector)),
            "config": params.config.to_dict(), "step": int(step), "lr": float(lr),
            "layout": params.layout}
    if extra:
        side.update(extra)
    path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path, dtype=np.float32):
    """Return ``(params, sidecar_dict)``."""
    path = Path(path)
    side_path = path.with_suffix(".json")
    if not path.is_file() or not side_path.is_file():
        raise DataError(f"{path}: checkpoint or its .json sidecar is missing")
    try:
        side = json.loads(side_path.read_text())
        cfg = FieldConfig.from_dict(side["config"])
    except (json.JSONDecodeError, KeyError, TypeError, ConfigError) as e:
        raise DataError(f"{side_path}: malformed sidecar ({e})") from e
    raw = path.read_bytes()
    n = n_params(cfg)
    if len(raw) != 4 * n:
        raise DataError(f"{path}: expected {4 * n} bytes for {n} parameters, found {len(raw)}")
    vec = np.frombuffer(raw, dtype="<f4").astype(dtype)
    return FieldParams(cfg, vec), side
