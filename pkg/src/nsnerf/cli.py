"""Command line entry point: ``nsnerf <subcommand> ...``.

Every subcommand validates its whole configuration and loads its inputs
before it creates anything under ``--out``. Logs go to stderr; results go
to files only. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import dataio, depthmap, pointcloud, trainer
from .errors import ConfigError, DataError, DomainError, NumericError
from .field import load_checkpoint, save_checkpoint

log = logging.getLogger("nsnerf")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

# flags that override TrainConfig fields; None means "not given"
TRAIN_FLAGS = {
    "sampler": str, "alpha": float, "n_samples": int, "range_scale": float,
    "iterations": int, "batch_rays": int, "lr": float, "t_near": float, "t_far": float,
}


# --------------------------------------------------------------------------
# helpers


def _read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: config file not found")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON ({e})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return data


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _parse_set(items) -> dict:
    """``key=value`` overrides; values are parsed as JSON when possible."""
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _train_config(args) -> trainer.TrainConfig:
    """Config file, then ``--set``, then named flags; later sources win."""
    d = {}
    file_cfg = _read_json(args.config) if getattr(args, "config", None) else {}
    d.update(file_cfg.get("train", file_cfg))
    d.update(_parse_set(getattr(args, "set", None)))
    for name in TRAIN_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            d[name] = v
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        return trainer.TrainConfig.from_dict(d)
    except TypeError as e:
        raise ConfigError(f"bad training option: {e}") from e


def _hole_cfg(args):
    if getattr(args, "no_fill", False):
        return None
    return depthmap.HoleFillConfig(kappa=args.kappa, window=args.window)


def _need_dir(path, what):
    if not Path(path).is_dir():
        raise DataError(f"{path}: {what} directory not found")


def _need_file(path, what):
    if not Path(path).is_file():
        raise DataError(f"{path}: {what} not found")


def _depth_sources(text) -> list[str]:
    srcs = [s.strip() for s in text.split(",") if s.strip()]
    for s in srcs:
        if s not in trainer.DEPTH_SOURCES:
            raise ConfigError(f"depth source must be one of {trainer.DEPTH_SOURCES}, got {s!r}")
    if not srcs:
        raise ConfigError("no depth source given")
    return srcs


def _write_loss_csv(path, loss_log):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iteration", "loss"])
        for it, loss in loss_log:
            w.writerow([it, repr(float(loss))])


def _write_report(out: Path, report: trainer.ExperimentReport, timing: bool):
    _write_json(out / "report.json", report.to_dict())
    with open(out / "per_view.jsonl", "w") as f:
        for row in report.rows:
            for key, vals in sorted(row.items()):
                if key.endswith("_per_view"):
                    src = key[len("psnr_"):-len("_per_view")]
                    for i, v in enumerate(vals):
                        f.write(json.dumps({"config_id": row["config_id"], "depth_source": src,
                                            "view": i, "psnr": v}, sort_keys=True) + "\n")
    if timing:
        _write_json(out / "timing.json", {"wall_clock_seconds": report.wall_clock_seconds})
    log.info("wall clock %.1f s", report.wall_clock_seconds)


def _load_model(path):
    _need_file(path, "checkpoint")
    params, side = load_checkpoint(path)
    if "train_config" not in side:
        raise DataError(f"{path}: sidecar lacks the training configuration")
    return params, trainer.TrainConfig.from_dict(side["train_config"])


def _eval_config(args, base: trainer.TrainConfig) -> trainer.TrainConfig:
    """Sampling options may be changed at evaluation time; the network may not."""
    kw = {}
    for name in ("sampler", "alpha", "n_samples", "range_scale", "t_near", "t_far"):
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = v
    if args.seed is not None:
        kw["seed"] = args.seed
    return base.replace(**kw)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    spec = (dataio.SyntheticSceneSpec.from_dict(_read_json(args.scene)) if args.scene
            else dataio.default_scene())
    seed = args.seed if args.seed is not None else 0
    ds = dataio.synthesize_dataset(spec, args.views, args.res, args.noise, seed, args.split,
                                   layout=args.layout)
    dataio.save_dataset(ds, args.out)
    log.info("wrote %d frames to %s", len(ds.frames), args.out)


def cmd_cloud(args):
    cfg = pointcloud.RefineConfig(tau=args.tau, stride=args.stride)
    _need_dir(args.dataset, "dataset")
    ds = dataio.load_dataset(args.dataset)
    if not ds.has_depth:
        raise DataError(f"{args.dataset}: point-cloud generation needs depth images")
    hist = []
    cloud = pointcloud.generate_refined_cloud(ds, cfg, history=hist)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataio.write_ply(cloud, out / "cloud.ply")
    _write_json(out / "cloud.json", {"points": len(cloud), "tau": cfg.tau, "stride": cfg.stride,
                                     "frames_used": len(hist), "size_after_each_view": hist})
    log.info("cloud: %d points from %d frames", len(cloud), len(hist))


def cmd_depth(args):
    hole = _hole_cfg(args)
    _need_file(args.cloud, "point cloud")
    _need_dir(args.dataset, "dataset")
    cloud = dataio.read_ply(args.cloud)
    ds = dataio.load_dataset(args.dataset)
    if not 0 <= args.view < len(ds.frames):
        raise ConfigError(f"view {args.view} out of range for {len(ds.frames)} frames")
    pose = ds.frames[args.view].pose
    raw = depthmap.project_cloud_depth(cloud, ds.intrinsics, pose)
    result = raw if hole is None else depthmap.fill_holes(raw, hole)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataio.write_depth_png(out / f"depth_{args.view:04d}.png", result.values, ds.depth_scale)
    stats = {"view": args.view, "zeros_before": raw.zero_count(), "zeros_after": result.zero_count(),
             "filled": int((result.provenance == depthmap.FILLED).sum())}
    _write_json(out / f"depth_{args.view:04d}.json", stats)
    log.info("zero pixels %d -> %d", stats["zeros_before"], stats["zeros_after"])


def cmd_train(args):
    cfg = _train_config(args)
    _need_dir(args.dataset, "dataset")
    ds = dataio.load_dataset(args.dataset)
    t0 = time.perf_counter()
    params, loss_log = trainer.train(ds, cfg)
    wall = time.perf_counter() - t0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out / "model.bin", step=cfg.iterations, lr=cfg.lr,
                    extra={"train_config": cfg.to_dict(),
                           "dataset_hash": trainer.dataset_hash(ds)})
    _write_loss_csv(out / "metrics.csv", loss_log)
    if args.timing:
        _write_json(out / "timing.json", {"wall_clock_seconds": wall})
    log.info("trained %d iterations in %.1f s, final loss %.6f", cfg.iterations, wall, loss_log[-1][1])


def _load_eval_inputs(args, cfg, sources):
    _need_dir(args.dataset, "dataset")
    test = dataio.load_dataset(args.dataset)
    cloud = None
    if "cloud" in sources and cfg.sampler == "near_surface":
        if not args.cloud:
            raise ConfigError("depth source 'cloud' needs --cloud")
        _need_file(args.cloud, "point cloud")
        cloud = dataio.read_ply(args.cloud)
    return test, cloud


def cmd_eval(args):
    sources = _depth_sources(args.depth_source)
    hole = _hole_cfg(args)
    params, base = _load_model(args.checkpoint)
    cfg = _eval_config(args, base)
    test, cloud = _load_eval_inputs(args, cfg, sources)
    report = trainer.ExperimentReport(dataset_hash=trainer.dataset_hash(test))
    t0 = time.perf_counter()
    scores, images = {}, {}
    for src in sources:
        res = trainer.evaluate(params, test, cloud, cfg, src, hole)
        scores[src] = [r.psnr for r in res]
        images[src] = [r.image for r in res]
    report.add_row(args.config_id or cfg.config_hash(), cfg, scores)
    report.wall_clock_seconds = time.perf_counter() - t0
    out = Path(args.out)
    (out / "renders").mkdir(parents=True, exist_ok=True)
    for src, imgs in images.items():
        for i, img in enumerate(imgs):
            dataio.write_color_png(out / "renders" / f"{src}_{i:04d}.png", img)
    _write_report(out, report, args.timing)
    for src in sources:
        log.info("psnr (%s depth): %.2f dB", src, report.rows[0][f"psnr_{src}"])


def cmd_sweep(args):
    base = _train_config(args)
    sources = _depth_sources(args.depth_source)
    hole = _hole_cfg(args)
    if args.axis not in trainer.SWEEP_AXES:
        raise ConfigError(f"--axis must be one of {sorted(trainer.SWEEP_AXES)}")
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values is empty")
    try:
        for v in values:
            base.replace(**{args.axis: trainer.SWEEP_AXES[args.axis](v)})
    except ValueError as e:
        raise ConfigError(f"bad --values entry: {e}") from e
    _need_dir(args.train, "training dataset")
    train_ds = dataio.load_dataset(args.train)
    test, cloud = _load_eval_inputs(argparse.Namespace(dataset=args.test, cloud=args.cloud),
                                    base, sources)
    report = trainer.sweep(train_ds, test, base, args.axis, values, cloud, sources, hole)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_report(out, report, args.timing)
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["config_id", "final_loss"] + [f"psnr_{s}" for s in sources])
        for row in report.rows:
            w.writerow([row["config_id"], repr(row["final_loss"])]
                       + [repr(row[f"psnr_{s}"]) for s in sources])
    for row in report.rows:
        log.info("%s: %s", row["config_id"],
                 ", ".join(f"{s} {row[f'psnr_{s}']:.2f} dB" for s in sources))


def cmd_render(args):
    sources = _depth_sources(args.depth_source)
    if len(sources) != 1:
        raise ConfigError("render takes exactly one depth source")
    hole = _hole_cfg(args)
    params, base = _load_model(args.checkpoint)
    cfg = _eval_config(args, base)
    ds, cloud = _load_eval_inputs(args, cfg, sources)
    if not 0 <= args.view < len(ds.frames):
        raise ConfigError(f"view {args.view} out of range for {len(ds.frames)} frames")
    fr = ds.frames[args.view]
    depth = None
    if cfg.sampler == "near_surface":
        if sources[0] == "gt":
            if fr.depth is None:
                raise DataError(f"{args.dataset}: view {args.view} has no depth image")
            depth = fr.depth
        else:
            depth = depthmap.estimate_depth(cloud, ds.intrinsics, fr.pose, hole).values
    near, far = trainer.ray_span(ds, cfg)
    rng = np.random.default_rng([cfg.seed, 7919, args.view])
    img = trainer.render_view(params, ds.intrinsics, fr.pose, depth, cfg, near, far, rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataio.write_color_png(out / f"render_{args.view:04d}.png", img)
    log.info("rendered view %d", args.view)


# --------------------------------------------------------------------------
# argument parsing


def _common(p):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="seed for every stochastic component")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    p.add_argument("--timing", action="store_true", help="also write timing.json (wall clock)")
    p.add_argument("-v", "--verbose", action="store_true")


def _train_flags(p):
    p.add_argument("--config", help="JSON file of training options")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one option")
    for name, typ in TRAIN_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)


def _hole_flags(p):
    p.add_argument("--kappa", type=float, default=2.0)
    p.add_argument("--window", type=int, default=11)
    p.add_argument("--no-fill", action="store_true", help="skip hole filling")


def _eval_flags(p):
    p.add_argument("--depth-source", default="gt", help="gt, cloud, or both comma separated")
    p.add_argument("--cloud", help="PLY file for cloud-estimated depth")
    for name in ("sampler", "alpha", "n_samples", "range_scale", "t_near", "t_far"):
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=TRAIN_FLAGS[name], default=None)
    _hole_flags(p)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nsnerf", description="Near-surface sampling radiance fields.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset")
    _common(p)
    p.add_argument("--scene", help="JSON scene spec (default: built-in three-primitive scene)")
    p.add_argument("--views", type=int, default=20)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.0, help="depth noise sigma")
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--layout", choices=("orbit", "circle"), default="orbit")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("cloud", help="build the refined point cloud")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--stride", type=int, default=5)
    p.set_defaults(func=cmd_cloud)

    p = sub.add_parser("depth", help="project a cloud into one view and fill holes")
    _common(p)
    p.add_argument("--cloud", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--view", type=int, default=0)
    _hole_flags(p)
    p.set_defaults(func=cmd_depth)

    p = sub.add_parser("train", help="train a radiance field")
    _common(p)
    p.add_argument("--dataset", required=True)
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="render and score test views")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--config-id", default=None)
    _eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train and evaluate along one option axis")
    _common(p)
    p.add_argument("--train", required=True, help="training dataset")
    p.add_argument("--test", required=True, help="test dataset")
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True, help="comma separated")
    p.add_argument("--depth-source", default="gt")
    p.add_argument("--cloud")
    _train_flags(p)
    _hole_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("render", help="render one view to PNG")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--view", type=int, default=0)
    _eval_flags(p)
    p.set_defaults(func=cmd_render)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
    try:
        if threads < 1:
            raise ConfigError("--threads must be >= 1")
        with threadpool_limits(limits=threads):
            args.func(args)
    except (ConfigError, DomainError) as e:
        log.error("configuration error: %s", e)
        return EXIT_CONFIG
    except DataError as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    except NumericError as e:
        log.error("numeric failure: %s", e)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
