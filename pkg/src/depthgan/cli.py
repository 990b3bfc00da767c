"""Command-line entry point.

Every subcommand writes into a run directory (``--run-dir``, or a fresh
timestamped directory under ``$DEPTHGAN_RUN_ROOT``, default ``./runs``) and
echoes its resolved configuration there as ``config.resolved.cfg``.

Exit codes: 0 success, 1 usage, 2 configuration, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from . import io
from .config import ConfigError, RunConfig, load_config_file, resolve_config
from .evaluation import (
    MetricReport,
    RandomConvEmbedder,
    depth_prediction_metrics,
    downsample_embedder,
    embedding_stats,
    export_pointcloud,
    frechet_distance,
    interpolate,
    rotation_metrics,
    rotation_sweep,
)
from .toy_scenes import center_crop, _resize, generate_dataset, load_batch, read_manifest, records_from_manifest
from .training import CheckpointError, MetricsLog, Trainer, load_checkpoint, resolve_checkpoint_path, save_step_checkpoint

logger = logging.getLogger("depthgan")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
RUN_ROOT_ENV = "DEPTHGAN_RUN_ROOT"
CONFIG_ECHO = "config.resolved.cfg"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------- run dirs and config


def _run_dir(args, command: str) -> Path:
    if args.run_dir:
        path = Path(args.run_dir)
    else:
        root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
        stamp = time.strftime("%Y%m%d-%H%M%S")
        path = root / f"{command}-{stamp}"
        n = 1
        while path.exists():
            path = root / f"{command}-{stamp}-{n}"
            n += 1
    if path.exists() and any(path.iterdir()) and not args.force:
        raise FileExistsError(f"run directory {path} is not empty; pass --force to write into it anyway")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _overrides(args) -> Dict[str, str]:
    values = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    for flag, key in (("preset", "preset"), ("steps", "train.steps"), ("seed", "train.seed"), ("data", "data.root")):
        value = getattr(args, flag, None)
        if value is not None:
            values[key] = value
    return values


def _resolve(args) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else {}
    return resolve_config(file_values, _overrides(args))


def _load_trainer(args) -> Trainer:
    return load_checkpoint(resolve_checkpoint_path(args.checkpoint))


def _codes(trainer: Trainer, n: int, seed: int):
    return trainer.G.sample_codes(n, torch.Generator().manual_seed(seed))


def _real_data(root, cfg: RunConfig, limit: Optional[int] = None):
    manifest = read_manifest(root)
    records = records_from_manifest(manifest)
    if limit is not None:
        records = records[:limit]
    rgb, depth = load_batch(records, cfg.model.resolution, root, manifest["near"], manifest["far"])
    return rgb, depth.clamp(cfg.camera.near, cfg.camera.far)


# ---------------------------------------------------------------------- subcommands


def cmd_make_toy_data(args, run: Path) -> None:
    cfg = _resolve(args)
    out = Path(args.out) if args.out else run / "data"
    manifest = generate_dataset(
        cfg.data.n_scenes,
        cfg.data.angles_per_scene,
        cfg.data.seed,
        out,
        resolution=cfg.model.resolution,
        theta_range=cfg.theta_range,
        focal_mm=cfg.camera.focal_mm,
        sensor_width_mm=cfg.camera.sensor_width_mm,
        near=cfg.camera.near,
        far=cfg.camera.far,
        camera_distance=cfg.camera.pivot_depth,
    )
    cfg.data.root = str(out)
    cfg.save(run / CONFIG_ECHO)
    print(f"wrote {len(manifest['records'])} records to {out}")


_RESUME_FREE = {"train.steps", "train.checkpoint_every", "train.log_every"}


def cmd_train(args, run: Path) -> None:
    cfg = _resolve(args)
    cfg.require("train")
    if args.resume:
        trainer = load_checkpoint(resolve_checkpoint_path(args.resume))
        stored, wanted = trainer.cfg.to_flat(), cfg.to_flat()
        diff = [k for k in wanted if k not in _RESUME_FREE and stored[k] != wanted[k]]
        if diff:
            raise CheckpointError("resume configuration differs from the checkpoint in: " + ", ".join(diff))
        for key in _RESUME_FREE:
            setattr(trainer.cfg.train, key.split(".")[1], getattr(cfg.train, key.split(".")[1]))
    else:
        trainer = Trainer(cfg)
    cfg.save(run / CONFIG_ECHO)
    rgb, depth = _real_data(cfg.data.root, cfg)
    remaining = max(0, cfg.train.steps - trainer.step)
    log = MetricsLog(run / "metrics.log")
    try:
        trainer.fit(rgb, depth, remaining, log=log, checkpoint_dir=run / "checkpoints")
    finally:
        log.close()
    path = save_step_checkpoint(trainer, run / "checkpoints")
    print(f"trained to step {trainer.step}; checkpoint {path}")


def cmd_sample(args, run: Path) -> None:
    trainer = _load_trainer(args)
    trainer.cfg.save(run / CONFIG_ECHO)
    G, cfg = trainer.G.eval(), trainer.cfg
    z_d, z_rgb = _codes(trainer, args.n, args.seed)
    if args.theta is None:
        lo, hi = cfg.theta_range
        theta = lo + (hi - lo) * torch.rand(args.n, generator=torch.Generator().manual_seed(args.seed + 1))
    else:
        theta = torch.full((args.n,), math.radians(args.theta))
    with torch.no_grad():
        rgb, depth = G(z_d, z_rgb, theta)
    for i in range(args.n):
        io.write_rgb_png(run / f"sample_{i:04d}_rgb.png", rgb[i].permute(1, 2, 0).numpy())
        io.write_depth_png(run / f"sample_{i:04d}_depth.png", depth[i, 0].numpy(), cfg.camera.near, cfg.camera.far)
    print(f"wrote {args.n} samples to {run}")


def _parse_angles(text: str) -> List[float]:
    try:
        angles = [float(a) for a in text.split(",") if a.strip()]
    except ValueError:
        raise UsageError(f"--angles expects comma-separated degrees, got {text!r}") from None
    if not angles:
        raise UsageError("--angles is empty")
    return angles


def cmd_sweep(args, run: Path) -> None:
    trainer = _load_trainer(args)
    trainer.cfg.save(run / CONFIG_ECHO)
    c = trainer.cfg.camera
    z_d, z_rgb = _codes(trainer, 1, args.seed)
    angles = _parse_angles(args.angles)
    img = rotation_sweep(trainer.G.eval(), z_d, z_rgb, angles, run / "sweep.png", (c.theta_min_deg, c.theta_max_deg))
    print(f"wrote {len(angles)}-column sweep {run / 'sweep.png'} ({img.width}x{img.height})")


def cmd_interpolate(args, run: Path) -> None:
    trainer = _load_trainer(args)
    trainer.cfg.save(run / CONFIG_ECHO)
    m = trainer.cfg.model.latent_dim
    g = torch.Generator().manual_seed(args.seed)
    z_a, z_b, other = (torch.randn(1, m, generator=g) for _ in range(3))
    frames = interpolate(
        trainer.G.eval(), z_a, z_b, args.which, other, math.radians(args.theta), args.n_steps, run / "interpolation.png", args.space
    )
    print(f"wrote {frames.shape[0]}-step {args.which} interpolation {run / 'interpolation.png'}")


def cmd_metrics(args, run: Path) -> None:
    trainer = _load_trainer(args)
    cfg = trainer.cfg
    if args.n_pairs is not None:
        cfg.metrics.n_pairs = args.n_pairs
    if args.seed is not None:
        cfg.metrics.seed = args.seed
    cfg.save(run / CONFIG_ECHO)
    c, n = cfg.camera, cfg.metrics.n_pairs
    G, D = trainer.G.eval(), trainer.D.eval()
    report = MetricReport(seed=cfg.metrics.seed, checkpoint=str(resolve_checkpoint_path(args.checkpoint)))
    pivot = [0.0, 0.0, c.pivot_depth] if c.pivot == "fixed" else None
    rng = torch.Generator().manual_seed(cfg.metrics.seed)
    rp, rc = rotation_metrics(G, trainer.k, n, rng, cfg.theta_range, c.near, c.far, pivot)
    report.add("RP", rp, n)
    report.add("RC", rc, n)
    data_root = args.data or cfg.data.root
    if data_root and D.branch is not None:
        real_rgb, real_depth = _real_data(data_root, cfg, limit=n)
        z_d, z_rgb = _codes(trainer, real_rgb.shape[0], cfg.metrics.seed + 1)
        lo, hi = cfg.theta_range
        theta = lo + (hi - lo) * torch.rand(real_rgb.shape[0], generator=torch.Generator().manual_seed(cfg.metrics.seed + 2))
        with torch.no_grad():
            fake_rgb, fake_depth = G(z_d, z_rgb, theta)
        dp_real, dp_fake = depth_prediction_metrics(D, (real_rgb, real_depth), (fake_rgb, fake_depth), c.near, c.far)
        report.add("DP_real", dp_real, real_rgb.shape[0])
        report.add("DP_fake", dp_fake, real_rgb.shape[0])
        embedder = RandomConvEmbedder(seed=cfg.metrics.seed) if cfg.metrics.embedder == "random-conv" else downsample_embedder()
        fd = frechet_distance(embedding_stats(real_rgb, embedder), embedding_stats(fake_rgb, embedder))
        report.add(f"FD_{cfg.metrics.embedder}", fd, real_rgb.shape[0])
    elif data_root:
        logger.warning("depth-prediction metrics skipped: the discriminator has no depth branch at this resolution")
    report.save(run / "metrics.json")
    print(report.to_json())


def cmd_export_pointcloud(args, run: Path) -> None:
    trainer = _load_trainer(args)
    trainer.cfg.save(run / CONFIG_ECHO)
    z_d, z_rgb = _codes(trainer, 1, args.seed)
    with torch.no_grad():
        rgb, depth = trainer.G.eval()(z_d, z_rgb, torch.tensor([math.radians(args.theta)]))
    n = export_pointcloud(rgb[0], depth[0], trainer.k, run / "pointcloud.ply")
    print(f"wrote {n} vertices to {run / 'pointcloud.ply'}")


def cmd_predict_depth(args, run: Path) -> None:
    trainer = _load_trainer(args)
    cfg = trainer.cfg
    cfg.save(run / CONFIG_ECHO)
    rgb = np.clip(_resize(center_crop(io.read_rgb_png(args.image)), cfg.model.resolution), -1.0, 1.0)
    x = torch.from_numpy(rgb.astype(np.float32)).permute(2, 0, 1)[None]
    with torch.no_grad():
        classes = trainer.D.eval().predict_depth(x).argmax(dim=1)[0].numpy()
    c, k = cfg.camera, cfg.model.depth_classes
    depth = c.near + (classes + 0.5) * (c.far - c.near) / k
    np.save(run / "depth_classes.npy", classes.astype(np.int64))
    io.write_depth_png(run / "depth.png", depth, c.near, c.far)
    print(f"wrote {classes.shape[0]}x{classes.shape[1]} depth prediction to {run / 'depth.png'}")


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="depthgan", description="Desk-scale dual-path RGBD GAN.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, func, help_text, config=False, checkpoint=False):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        p.add_argument("--run-dir", help=f"output directory (default: fresh dir under ${RUN_ROOT_ENV} or ./runs)")
        p.add_argument("--force", action="store_true", help="write into a non-empty run directory")
        if config:
            p.add_argument("--config", help="flat 'section.key = value' config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
            p.add_argument("--preset", help="desk64, paper128, paper256-bedroom or paper256-kitchen")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint file or checkpoint directory")
        return p

    p = add("make-toy-data", cmd_make_toy_data, "render a procedural RGBD dataset", config=True)
    p.add_argument("--out", help="dataset directory (default: <run-dir>/data)")

    p = add("train", cmd_train, "train the generator and discriminator", config=True)
    p.add_argument("--steps", type=int, help="total training steps (train.steps)")
    p.add_argument("--seed", type=int, help="training seed (train.seed)")
    p.add_argument("--data", help="dataset directory (data.root)")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = add("sample", cmd_sample, "write generated RGBD samples", checkpoint=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--theta", type=float, help="view angle in degrees (default: uniform in range)")
    p.add_argument("--seed", type=int, default=0)

    p = add("sweep", cmd_sweep, "render one scene at several angles", checkpoint=True)
    p.add_argument("--angles", default="-15,-7.5,0,7.5,15", help="comma-separated degrees")
    p.add_argument("--seed", type=int, default=0)

    p = add("interpolate", cmd_interpolate, "interpolate one latent code with the other fixed", checkpoint=True)
    p.add_argument("--which", choices=["depth", "appearance"], default="depth")
    p.add_argument("--n-steps", type=int, default=8)
    p.add_argument("--theta", type=float, default=0.0, help="degrees")
    p.add_argument("--space", choices=["z", "w"], default="z")
    p.add_argument("--seed", type=int, default=0)

    p = add("metrics", cmd_metrics, "compute RP, RC and, with data, DP and a Frechet distance", checkpoint=True)
    p.add_argument("--data", help="held-out dataset directory")
    p.add_argument("--n-pairs", type=int)
    p.add_argument("--seed", type=int)

    p = add("export-pointcloud", cmd_export_pointcloud, "write one generated RGBD image as a PLY point cloud", checkpoint=True)
    p.add_argument("--theta", type=float, default=0.0, help="degrees")
    p.add_argument("--seed", type=int, default=0)

    p = add("predict-depth", cmd_predict_depth, "predict depth classes for an RGB image", checkpoint=True)
    p.add_argument("--image", required=True, help="RGB PNG")
    return parser


def _join_negative_values(argv: List[str]) -> List[str]:
    # "--angles -15,0,15" would otherwise read "-15,0,15" as a flag
    out, i = [], 0
    while i < len(argv):
        if argv[i] in ("--angles", "--theta") and i + 1 < len(argv) and argv[i + 1][:1] == "-":
            out.append(f"{argv[i]}={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    argv = _join_negative_values(list(sys.argv[1:] if argv is None else argv))
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        if hasattr(args, "config"):
            _resolve(args).require(args.command)  # fail on bad config before creating a run directory
        run = _run_dir(args, args.command)
        args.func(args, run)
    except UsageError as exc:
        print(f"depthgan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"depthgan: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, OSError, ValueError, FloatingPointError, RuntimeError) as exc:
        print(f"depthgan: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
