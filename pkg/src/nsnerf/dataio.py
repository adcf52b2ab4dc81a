"""Dataset directories, PNG/PLY file IO and the procedural synthetic scene.

Dataset layout::

    <dir>/manifest.json
    <dir>/color/0000.png   8-bit RGB
    <dir>/depth/0000.png   16-bit grayscale, value * depth_scale = ray distance

``manifest.json`` holds ``intrinsics`` ({fx, fy, cx, cy, width, height}),
``depth_scale`` (world units per integer step, 0 reserved for
hole/background) and ``frames`` (``pose``: row-major 4x4 camera-to-world,
``color`` and ``depth``: paths relative to the directory). Optional keys
``near``, ``far`` and ``scene_bbox`` ([[xmin, ymin, zmin], [xmax, ymax, zmax]])
are written by the synthetic generator and used as training defaults.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import geom
from .errors import ConfigError, DataError, DomainError
from .geom import CameraIntrinsics, Pose
from .pointcloud import PointCloud

DEFAULT_DEPTH_SCALE = 1e-4


@dataclass(eq=False)
class Frame:
    pose: Pose
    color: np.ndarray
    depth: np.ndarray | None = None

    @property
    def background_mask(self) -> np.ndarray | None:
        if self.depth is None:
            return None
        return self.depth == 0


@dataclass(eq=False)
class Dataset:
    intrinsics: CameraIntrinsics
    frames: list[Frame]
    depth_scale: float = DEFAULT_DEPTH_SCALE
    near: float | None = None
    far: float | None = None
    scene_bbox: np.ndarray | None = None

    def __post_init__(self):
        shape = self.intrinsics.shape
        for i, fr in enumerate(self.frames):
            if fr.color.shape != shape + (3,):
                raise DataError(f"frame {i}: color shape {fr.color.shape} != {shape + (3,)}")
            if fr.depth is not None:
                if fr.depth.shape != shape:
                    raise DataError(f"frame {i}: depth shape {fr.depth.shape} != {shape}")
                if not np.all(np.isfinite(fr.depth)) or np.any(fr.depth < 0):
                    raise DataError(f"frame {i}: depth must be finite and >= 0")

    @property
    def has_depth(self) -> bool:
        return bool(self.frames) and all(fr.depth is not None for fr in self.frames)

    def subset(self, indices) -> "Dataset":
        return Dataset(self.intrinsics, [self.frames[i] for i in indices], self.depth_scale,
                       self.near, self.far, self.scene_bbox)


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    albedo: tuple


@dataclass(frozen=True)
class Box:
    min_corner: tuple
    max_corner: tuple
    albedo: tuple


@dataclass(frozen=True)
class SyntheticSceneSpec:
    spheres: tuple = ()
    boxes: tuple = ()
    light_direction: tuple = (0.3, -0.5, 0.8)
    ambient: float = 0.25

    def __post_init__(self):
        if not self.spheres and not self.boxes:
            raise ConfigError("scene: at least one primitive is required")
        for i, s in enumerate(self.spheres):
            if not s.radius > 0:
                raise ConfigError(f"scene.spheres[{i}].radius: must be > 0, got {s.radius}")
            _check_vec(s.center, f"scene.spheres[{i}].center")
            _check_rgb(s.albedo, f"scene.spheres[{i}].albedo")
        for i, b in enumerate(self.boxes):
            _check_vec(b.min_corner, f"scene.boxes[{i}].min")
            _check_vec(b.max_corner, f"scene.boxes[{i}].max")
            if not all(lo < hi for lo, hi in zip(b.min_corner, b.max_corner)):
                raise ConfigError(f"scene.boxes[{i}]: min must be < max on every axis")
            _check_rgb(b.albedo, f"scene.boxes[{i}].albedo")
        _check_vec(self.light_direction, "scene.light_direction")
        n = math.sqrt(sum(c * c for c in self.light_direction))
        if abs(n - 1.0) > 1e-6:
            if n == 0:
                raise ConfigError("scene.light_direction: must be non-zero")
            object.__setattr__(self, "light_direction", tuple(c / n for c in self.light_direction))
        if not 0 <= self.ambient <= 1:
            raise ConfigError(f"scene.ambient: must lie in [0, 1], got {self.ambient}")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        try:
            spheres = tuple(Sphere(tuple(s["center"]), float(s["radius"]), tuple(s["albedo"]))
                            for s in d.get("spheres", []))
            boxes = tuple(Box(tuple(b["min"]), tuple(b["max"]), tuple(b["albedo"]))
                          for b in d.get("boxes", []))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"scene: malformed primitive ({e!r})") from e
        kw = {}
        if "light_direction" in d:
            kw["light_direction"] = tuple(d["light_direction"])
        if "ambient" in d:
            kw["ambient"] = float(d["ambient"])
        return cls(spheres, boxes, **kw)

    def to_dict(self) -> dict:
        return {
            "spheres": [{"center": list(s.center), "radius": s.radius, "albedo": list(s.albedo)}
                        for s in self.spheres],
            "boxes": [{"min": list(b.min_corner), "max": list(b.max_corner), "albedo": list(b.albedo)}
                      for b in self.boxes],
            "light_direction": list(self.light_direction),
            "ambient": self.ambient,
        }

    def bbox(self) -> np.ndarray:
        lo, hi = [], []
        for s in self.spheres:
            c = np.asarray(s.center, dtype=np.float64)
            lo.append(c - s.radius)
            hi.append(c + s.radius)
        for b in self.boxes:
            lo.append(np.asarray(b.min_corner, dtype=np.float64))
            hi.append(np.asarray(b.max_corner, dtype=np.float64))
        return np.stack([np.min(lo, axis=0), np.max(hi, axis=0)])


def _check_vec(v, path):
    if len(v) != 3 or not all(math.isfinite(float(c)) for c in v):
        raise ConfigError(f"{path}: expected 3 finite numbers, got {v!r}")


def _check_rgb(v, path):
    _check_vec(v, path)
    if not all(0 <= c <= 1 for c in v):
        raise ConfigError(f"{path}: channels must lie in [0, 1]")


def default_scene() -> SyntheticSceneSpec:
    """Three primitives of distinct colors inside [-1, 1]^3."""
    return SyntheticSceneSpec(
        spheres=(Sphere((0.0, 0.0, 0.1), 0.6, (0.85, 0.25, 0.2)),
                 Sphere((0.55, -0.45, -0.15), 0.35, (0.2, 0.35, 0.9))),
        boxes=(Box((-0.9, -0.6, -0.6), (-0.2, 0.6, -0.3), (0.25, 0.8, 0.3)),),
    )


def sphere_scene() -> SyntheticSceneSpec:
    """A single unit sphere at the origin."""
    return SyntheticSceneSpec(spheres=(Sphere((0.0, 0.0, 0.0), 1.0, (0.85, 0.25, 0.2)),))


def _intersect(spec: SyntheticSceneSpec, origins, dirs):
    """Nearest positive hit distance, normal and albedo for each ray."""
    n = len(dirs)
    t_best = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    albedo = np.zeros((n, 3))
    eps = 1e-9
    for s in spec.spheres:
        oc = origins - np.asarray(s.center, dtype=np.float64)
        b = np.einsum("ij,ij->i", dirs, oc)
        c = np.einsum("ij,ij->i", oc, oc) - s.radius ** 2
        disc = b * b - c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > eps, t0, np.where(t1 > eps, t1, np.inf))
        t = np.where(hit, t, np.inf)
        better = t < t_best
        t_best = np.where(better, t, t_best)
        p = origins + t[:, None] * dirs
        nrm = (p - np.asarray(s.center)) / s.radius
        normal[better] = nrm[better]
        albedo[better] = s.albedo
    for bx in spec.boxes:
        lo = np.asarray(bx.min_corner, dtype=np.float64)
        hi = np.asarray(bx.max_corner, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            ta = (lo - origins) * inv
            tb = (hi - origins) * inv
        ta = np.nan_to_num(ta, nan=-np.inf)
        tb = np.nan_to_num(tb, nan=np.inf)
        tmin_ax = np.minimum(ta, tb)
        tmax_ax = np.maximum(ta, tb)
        tnear = tmin_ax.max(axis=1)
        tfar = tmax_ax.min(axis=1)
        axis = tmin_ax.argmax(axis=1)
        hit = (tnear <= tfar) & (tfar > eps)
        t = np.where(tnear > eps, tnear, tfar)
        t = np.where(hit, t, np.inf)
        better = t < t_best
        t_best = np.where(better, t, t_best)
        nrm = np.zeros((n, 3))
        rows = np.arange(n)
        nrm[rows, axis] = -np.sign(dirs[rows, axis])
        normal[better] = nrm[better]
        albedo[better] = bx.albedo
    return t_best, normal, albedo


def render_synthetic(spec: SyntheticSceneSpec, intr: CameraIntrinsics, pose: Pose,
                     depth_noise_sigma: float = 0.0, rng_seed: int = 0):
    """Ground-truth color, ray-distance depth and background mask for one view."""
    if depth_noise_sigma < 0:
        raise DomainError("depth_noise_sigma must be >= 0")
    origins, dirs = geom.pixel_rays(intr, pose)
    h, w = intr.shape
    t, normal, albedo = _intersect(spec, origins.reshape(-1, 3), dirs.reshape(-1, 3))
    hit = np.isfinite(t)
    light = np.asarray(spec.light_direction, dtype=np.float64)
    lambert = np.clip(normal @ light, 0.0, None)
    shade = spec.ambient + (1.0 - spec.ambient) * lambert
    color = np.where(hit[:, None], np.clip(albedo * shade[:, None], 0.0, 1.0), 0.0)
    depth = np.where(hit, t, 0.0)
    if depth_noise_sigma > 0:
        rng = np.random.default_rng(rng_seed)
        noise = rng.normal(0.0, depth_noise_sigma, size=depth.shape)
        depth = np.where(hit, np.maximum(depth + noise, 1e-6), 0.0)
    depth = depth.reshape(h, w)
    return color.reshape(h, w, 3), depth, depth == 0


def orbit_poses(n: int, radius: float = 4.0, split: str = "train", target=(0.0, 0.0, 0.0)):
    """Deterministic viewpoints on the upper hemisphere around ``target``.

    Train views follow one ascending spiral; test views are offset by half an
    azimuth step and use intermediate elevations, so the two never coincide.
    """
    if split not in ("train", "test"):
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    golden = math.pi * (3.0 - math.sqrt(5.0))
    offset = 0.5 * golden if split == "test" else 0.0
    poses = []
    for i in range(n):
        frac = (i + (0.5 if split == "test" else 0.25)) / n
        elev = math.radians(10.0 + 50.0 * frac)
        azim = i * golden + offset
        eye = np.asarray(target) + radius * np.array([math.cos(elev) * math.cos(azim),
                                                      math.cos(elev) * math.sin(azim),
                                                      math.sin(elev)])
        poses.append(geom.look_at(eye, target))
    return poses


def circle_poses(n: int, radius: float = 4.0, elevation_deg: float = 30.0, target=(0.0, 0.0, 0.0)):
    """``n`` evenly spaced viewpoints on one horizontal ring, all looking at ``target``."""
    elev = math.radians(elevation_deg)
    poses = []
    for i in range(n):
        azim = 2.0 * math.pi * i / n
        eye = np.asarray(target) + radius * np.array([math.cos(elev) * math.cos(azim),
                                                      math.cos(elev) * math.sin(azim),
                                                      math.sin(elev)])
        poses.append(geom.look_at(eye, target))
    return poses


def synthesize_dataset(spec: SyntheticSceneSpec, views: int, resolution: int,
                       noise: float = 0.0, seed: int = 0, split: str = "train",
                       fov_deg: float = 40.0, radius: float = 4.0, layout: str = "orbit") -> Dataset:
    """Render ``views`` frames of ``spec``.

    ``layout`` is ``"orbit"`` (spiral over the upper hemisphere, split aware)
    or ``"circle"`` (one ring at 30 degrees elevation).
    """
    if views < 1:
        raise ConfigError(f"views must be >= 1, got {views}")
    if resolution < 1:
        raise ConfigError(f"resolution must be >= 1, got {resolution}")
    if noise < 0:
        raise ConfigError(f"noise must be >= 0, got {noise}")
    if layout == "orbit":
        poses = orbit_poses(views, radius, split)
    elif layout == "circle":
        poses = circle_poses(views, radius)
    else:
        raise ConfigError(f"layout must be 'orbit' or 'circle', got {layout!r}")
    intr = CameraIntrinsics.from_fov(resolution, resolution, fov_deg)
    seeds = np.random.SeedSequence(seed).spawn(views)
    frames = []
    for pose, ss in zip(poses, seeds):
        color, depth, _ = render_synthetic(spec, intr, pose, noise, int(ss.generate_state(1)[0]))
        frames.append(Frame(pose, color, depth))
    return Dataset(intr, frames, DEFAULT_DEPTH_SCALE, near=radius - 2.0, far=radius + 2.0,
                   scene_bbox=spec.bbox())


# --------------------------------------------------------------------------
# images


def write_color_png(path, color):
    arr = np.round(np.clip(np.asarray(color, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_color_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.array(im.convert("RGB"))
    except (OSError, ValueError) as e:
        raise DataError(f"{path}: cannot read color image ({e})") from e
    return arr.astype(np.float64) / 255.0


def quantize_depth(depth, depth_scale) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    q = np.round(depth / depth_scale)
    q = np.where(depth > 0, np.maximum(q, 1), 0)
    if np.any(q > 65535):
        raise DataError(f"depth {depth.max():.4f} exceeds 16-bit range at scale {depth_scale}")
    return q.astype(np.uint16)


def write_depth_png(path, depth, depth_scale=DEFAULT_DEPTH_SCALE):
    q = quantize_depth(depth, depth_scale)
    Image.fromarray(q).save(path, format="PNG")  # uint16 maps to mode I;16


def read_depth_png(path, depth_scale=DEFAULT_DEPTH_SCALE) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.array(im)
    except (OSError, ValueError) as e:
        raise DataError(f"{path}: cannot read depth image ({e})") from e
    if arr.ndim != 2:
        raise DataError(f"{path}: depth image must be single-channel")
    return arr.astype(np.float64) * depth_scale


# --------------------------------------------------------------------------
# dataset directories


def save_dataset(ds: Dataset, root):
    root = Path(root)
    for fr in ds.frames:
        # raise on out-of-range depth before any file exists
        if fr.depth is not None:
            quantize_depth(fr.depth, ds.depth_scale)
    (root / "color").mkdir(parents=True, exist_ok=True)
    if ds.has_depth:
        (root / "depth").mkdir(parents=True, exist_ok=True)
    frames = []
    for i, fr in enumerate(ds.frames):
        entry = {"pose": [float(x) for x in fr.pose.as_matrix().reshape(-1)],
                 "color": f"color/{i:04d}.png"}
        write_color_png(root / entry["color"], fr.color)
        if fr.depth is not None:
            entry["depth"] = f"depth/{i:04d}.png"
            write_depth_png(root / entry["depth"], fr.depth, ds.depth_scale)
        frames.append(entry)
    manifest = {"intrinsics": ds.intrinsics.to_dict(), "depth_scale": ds.depth_scale,
                "frames": frames}
    if ds.near is not None:
        manifest["near"] = ds.near
    if ds.far is not None:
        manifest["far"] = ds.far
    if ds.scene_bbox is not None:
        manifest["scene_bbox"] = np.asarray(ds.scene_bbox).tolist()
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_dataset(root) -> Dataset:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DataError(f"{mpath}: manifest not found")
    try:
        m = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{mpath}: malformed JSON ({e})") from e
    try:
        intr = CameraIntrinsics(**m["intrinsics"])
        scale = float(m.get("depth_scale", DEFAULT_DEPTH_SCALE))
        entries = m["frames"]
    except (KeyError, TypeError, DomainError) as e:
        raise DataError(f"{mpath}: invalid manifest ({e})") from e
    if not scale > 0:
        raise DataError(f"{mpath}: depth_scale must be > 0")
    frames = []
    for i, e in enumerate(entries):
        try:
            pose = Pose.from_matrix(e["pose"])
        except (KeyError, ValueError) as err:
            raise DataError(f"{mpath}: frame {i} has an invalid pose ({err})") from err
        if "color" not in e:
            raise DataError(f"{mpath}: frame {i} lacks a color entry")
        cpath = root / e["color"]
        if not cpath.is_file():
            raise DataError(f"{cpath}: color image not found")
        color = read_color_png(cpath)
        if color.shape[:2] != intr.shape:
            raise DataError(f"{cpath}: size {color.shape[1]}x{color.shape[0]} does not match "
                            f"intrinsics {intr.width}x{intr.height}")
        depth = None
        if e.get("depth"):
            dpath = root / e["depth"]
            if not dpath.is_file():
                raise DataError(f"{dpath}: depth image not found")
            depth = read_depth_png(dpath, scale)
            if depth.shape != intr.shape:
                raise DataError(f"{dpath}: size {depth.shape[1]}x{depth.shape[0]} does not match "
                                f"intrinsics {intr.width}x{intr.height}")
        frames.append(Frame(pose, color, depth))
    bbox = m.get("scene_bbox")
    return Dataset(intr, frames, scale, m.get("near"), m.get("far"),
                   None if bbox is None else np.asarray(bbox, dtype=np.float64))


# --------------------------------------------------------------------------
# point clouds

_PLY_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                       ("red", "u1"), ("green", "u1"), ("blue", "u1")])
_PLY_PROPS = [("float", "x"), ("float", "y"), ("float", "z"),
              ("uchar", "red"), ("uchar", "green"), ("uchar", "blue")]


class PlyError(DataError):
    pass


def ply_header(n: int) -> bytes:
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    lines += [f"property {t} {name}" for t, name in _PLY_PROPS]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def write_ply(cloud: PointCloud, path):
    rec = np.zeros(len(cloud), dtype=_PLY_DTYPE)
    pos = cloud.positions.astype("<f4")
    rec["x"], rec["y"], rec["z"] = pos[:, 0], pos[:, 1], pos[:, 2]
    rgb = np.round(np.clip(cloud.colors, 0, 1) * 255).astype(np.uint8)
    rec["red"], rec["green"], rec["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    with open(path, "wb") as f:
        f.write(ply_header(len(cloud)))
        f.write(rec.tobytes())


def read_ply(path) -> PointCloud:
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise PlyError(f"{path}: not a PLY file (byte 0)")
    body = end + len(b"end_header\n")
    lines = data[:end].decode("ascii", errors="replace").split("\n")
    offset = 0
    n = None
    props = []
    for line in lines:
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            pass
        elif parts[0] == "format":
            if parts[1:] != ["binary_little_endian", "1.0"]:
                raise PlyError(f"{path}: unsupported format {' '.join(parts[1:])!r} at byte {offset}")
        elif parts[0] == "element":
            if parts[1] != "vertex" or n is not None:
                raise PlyError(f"{path}: unexpected element {parts[1]!r} at byte {offset}")
            try:
                n = int(parts[2])
            except (IndexError, ValueError):
                raise PlyError(f"{path}: bad vertex count at byte {offset}") from None
        elif parts[0] == "property":
            props.append(tuple(parts[1:3]))
        else:
            raise PlyError(f"{path}: unknown header line {line!r} at byte {offset}")
        offset += len(line) + 1
    if n is None or n < 0:
        raise PlyError(f"{path}: missing vertex element at byte {offset}")
    if props != _PLY_PROPS:
        raise PlyError(f"{path}: expected properties x,y,z float and red,green,blue uchar")
    need = n * _PLY_DTYPE.itemsize
    have = len(data) - body
    if have < need:
        raise PlyError(f"{path}: truncated payload, expected {need} bytes after byte {body}, "
                       f"file ends at byte {len(data)}")
    rec = np.frombuffer(data, dtype=_PLY_DTYPE, count=n, offset=body)
    pos = np.stack([rec["x"], rec["y"], rec["z"]], axis=-1).astype(np.float64)
    col = np.stack([rec["red"], rec["green"], rec["blue"]], axis=-1).astype(np.float64) / 255.0
    return PointCloud(pos, col, np.full(n, -1))


def ply_payload_size(n: int) -> int:
    return n * _PLY_DTYPE.itemsize

