"""Command-line entry point binding the pipeline into reproducible runs.

Subcommands: synth, init, train, render, eval.  Every command writes a
config echo (config.json) into its output directory first, so any
artifact can be reproduced from the echo plus the dataset alone.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import DatasetError, DynsplatError, NumericalAbort, sigmoid
from .deform import DEFAULT_BASIS_COUNT, deform_gaussians
from .ingest import export_ply, load_dataset, save_depth, save_image, save_mask
from .init import InitConfig, fuse_initial_cloud, motion_masks
from .losses import LossConfig
from .metrics import MetricReport, depth_metrics, fps_benchmark, psnr, ssim
from .render import cull_and_project, rasterize
from .synthetic import SyntheticSpec, generate_synthetic, write_dataset
from .train import (DensifyConfig, OptimConfig, TrainConfig, load_checkpoint,
                    save_checkpoint, train, Adam)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


@dataclass
class RunConfig:
    """Flat bag of every knob, serialized verbatim as the config echo."""

    # initialization
    tau: float | None = None
    stride: int = 4
    first_frame_only: bool = False
    basis_count: int = DEFAULT_BASIS_COUNT
    # losses
    lambda_smooth: float = 1e-4
    lambda_dssim: float = 0.2
    depth_loss_kind: str = "normalized"
    canny_low: float = 0.1
    canny_high: float = 0.2
    canny_blur_sigma: float = 1.4
    # optimizer
    iterations: int = 6000
    lr_position: float = 1.6e-3
    lr_position_final: float = 1.6e-5
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 0.05
    lr_color: float = 2.5e-3
    lr_deform: float = 1.6e-3
    # density control
    densify_enabled: bool = True
    densify_interval: int = 100
    densify_warmup: int = 500
    densify_stop: int = 3000
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    max_gaussians: int = 500_000
    # run
    log_interval: int = 100
    threads: int = 1
    seed: int = 0            # reserved; the pipeline is deterministic

    def init_config(self):
        return InitConfig(tau=self.tau, stride=self.stride)

    def loss_config(self):
        return LossConfig(lambda_smooth=self.lambda_smooth,
                          lambda_dssim=self.lambda_dssim,
                          depth_loss_kind=self.depth_loss_kind,
                          canny_low=self.canny_low,
                          canny_high=self.canny_high,
                          canny_blur_sigma=self.canny_blur_sigma)

    def train_config(self):
        optim = OptimConfig(iterations=self.iterations,
                            lr_position=self.lr_position,
                            lr_position_final=self.lr_position_final,
                            lr_rotation=self.lr_rotation,
                            lr_scale=self.lr_scale,
                            lr_opacity=self.lr_opacity,
                            lr_color=self.lr_color,
                            lr_deform=self.lr_deform)
        densify = DensifyConfig(enabled=self.densify_enabled,
                                interval=self.densify_interval,
                                warmup=self.densify_warmup,
                                stop=self.densify_stop,
                                grad_threshold=self.densify_grad_threshold,
                                prune_opacity=self.prune_opacity,
                                max_gaussians=self.max_gaussians)
        return TrainConfig(loss=self.loss_config(), optim=optim,
                           densify=densify, log_interval=self.log_interval,
                           threads=self.threads)

    @classmethod
    def from_file(cls, path):
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise DatasetError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise UsageError(f"invalid config key(s): {', '.join(unknown)}")
        return cls(**raw)

    def echo(self, out_dir, command, extras=None):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = {"command": command, **dataclasses.asdict(self)}
        if extras:
            payload.update(extras)
        (out_dir / "config.json").write_text(json.dumps(payload, indent=2,
                                                        sort_keys=True) + "\n")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_config_flags(p):
    p.add_argument("--config", type=str, default=None,
                   help="JSON file of RunConfig fields; flags override it")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool" or isinstance(f.default, bool):
            p.add_argument(flag, type=lambda s: s.lower() in ("1", "true", "yes"),
                           default=None, metavar="BOOL")
        else:
            typ = float if isinstance(f.default, float) or f.name == "tau" \
                else int if isinstance(f.default, int) else str
            p.add_argument(flag, type=typ, default=None)


def _resolve_config(args):
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for f in fields(RunConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            setattr(cfg, f.name, val)
    return cfg


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args, cfg):
    spec = SyntheticSpec(count=args.count, num_frames=args.frames,
                         height=args.size, width=args.size,
                         motion_amplitude=args.motion_amplitude,
                         depth_noise=args.depth_noise,
                         occluder_radius=args.occluder_radius,
                         two_layer=args.two_layer, seed=cfg.seed)
    scene = generate_synthetic(spec)
    write_dataset(scene, args.out)
    cfg.echo(args.out, "synth", {"spec": dataclasses.asdict(spec)})
    print(f"wrote {spec.num_frames} frames to {args.out}")
    return EXIT_OK


def cmd_init(args, cfg):
    seq = load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out, "init", {"dataset": str(args.dataset)})

    icfg = cfg.init_config()
    masks = motion_masks(seq, icfg)
    counts = {0: int((seq.frames[0].tissue_mask
                      & seq.frames[0].valid_depth)[::icfg.stride,
                                                   ::icfg.stride].sum())}
    for mm in masks:
        save_mask(mm.mask, out / f"motion_mask_{mm.frame_index:06d}.png")
        counts[mm.frame_index] = int(
            mm.mask[::icfg.stride, ::icfg.stride].sum())

    cloud = fuse_initial_cloud(seq, icfg, basis_count=cfg.basis_count,
                               first_frame_only=cfg.first_frame_only)
    export_ply(zip(cloud.positions, cloud.colors), out / "cloud.ply")
    lines = [f"frame {i}: {counts[i]} points" for i in sorted(counts)]
    lines.append(f"total: {cloud.count} points")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_train(args, cfg):
    seq = load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out, "train", {"dataset": str(args.dataset)})

    tcfg = cfg.train_config()
    if args.resume:
        ck = load_checkpoint(args.resume)
        result = train(seq, ck.cloud, tcfg, out_dir=out,
                       resume_iteration=ck.iteration, adam=ck.adam,
                       grad_accum=ck.grad_accum, denom=ck.denom,
                       scene_extent=ck.scene_extent)
    else:
        cloud = fuse_initial_cloud(seq, cfg.init_config(),
                                   basis_count=cfg.basis_count,
                                   first_frame_only=cfg.first_frame_only)
        result = train(seq, cloud, tcfg, out_dir=out)
    print(f"trained {result.iterations} iterations, "
          f"{result.cloud.count} Gaussians -> {out / 'checkpoint.bin'}")
    return EXIT_OK


def _parse_frames(selection, total):
    if selection == "all":
        return list(range(total))
    try:
        idx = [int(s) for s in selection.split(",") if s]
    except ValueError as exc:
        raise UsageError(f"bad frame selection {selection!r}") from exc
    for i in idx:
        if not 0 <= i < total:
            raise UsageError(f"frame index {i} out of range (0..{total - 1})")
    return idx


def _render_frame(cloud, seq, index, threads=1):
    frame = seq.frames[index]
    attrs = deform_gaussians(cloud, frame.time)
    prims, _ = cull_and_project(attrs.positions, attrs.rotations, attrs.scales,
                                sigmoid(cloud.opacity_logits), cloud.colors,
                                seq.camera)
    return rasterize(prims, seq.camera, threads=threads)


def cmd_render(args, cfg):
    seq = load_dataset(args.dataset)
    cloud = load_checkpoint(args.checkpoint).cloud
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out, "render", {"dataset": str(args.dataset),
                             "checkpoint": str(args.checkpoint),
                             "frames": args.frames})
    indices = _parse_frames(args.frames, len(seq))
    for i in indices:
        rendered = _render_frame(cloud, seq, i, cfg.threads)
        save_image(np.clip(rendered.color, 0.0, 1.0),
                   out / f"color_{i:06d}.png")
        save_depth(np.where(rendered.covered, rendered.depth, 0.0),
                   seq.depth_scale, out / f"depth_{i:06d}.png")
    print(f"rendered {len(indices)} frames to {out}")
    return EXIT_OK


def _quantize_like_dataset(rendered, seq):
    """Snap a render onto the dataset's 8-bit / 16-bit storage grids."""
    color = np.round(np.clip(rendered.color, 0.0, 1.0) * 255.0) / 255.0
    step = seq.depth_scale
    depth = np.round(np.clip(rendered.depth / step, 0, 65535)) * step
    depth = np.where(rendered.covered, depth, 0.0)
    return color, depth


def cmd_eval(args, cfg):
    seq = load_dataset(args.dataset)
    cloud = load_checkpoint(args.checkpoint).cloud
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out, "eval", {"dataset": str(args.dataset),
                           "checkpoint": str(args.checkpoint)})

    indices = seq.test_indices
    if not indices:
        raise DatasetError("dataset has no test frames")
    per_frame = []
    for i in indices:
        rendered = _render_frame(cloud, seq, i, cfg.threads)
        color, depth = _quantize_like_dataset(rendered, seq)
        frame = seq.frames[i]
        tissue = frame.tissue_mask.astype(bool)
        dmask = tissue & frame.valid_depth & rendered.covered
        if np.any(dmask):
            abs_rel, sq_rel, rmse, rmse_log, _ = depth_metrics(
                depth, frame.depth, dmask)
        else:
            abs_rel = sq_rel = rmse = rmse_log = float("nan")
        per_frame.append(MetricReport(
            psnr=psnr(color, frame.image, tissue),
            ssim=ssim(color, frame.image, tissue),
            abs_rel=abs_rel, sq_rel=sq_rel, rmse=rmse, rmse_log=rmse_log))

    bench = fps_benchmark(cloud, seq, repetitions=args.repetitions,
                          threads=cfg.threads)
    agg = MetricReport(*[float(np.mean([getattr(r, f.name) for r in per_frame]))
                         for f in fields(MetricReport) if f.name != "fps"],
                       fps=bench["fps_median"])

    lines = []
    for i, rep in zip(indices, per_frame):
        lines += [f"frame_{i:06d}.{line}" for line in rep.format_lines()
                  if not line.startswith("fps=")]
    lines += [f"aggregate.{line}" for line in agg.format_lines()]
    lines.append(f"aggregate.fps_iqr={bench['fps_iqr']:.6f}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    (out / "report.json").write_text(json.dumps({
        "per_frame": {str(i): rep.as_dict()
                      for i, rep in zip(indices, per_frame)},
        "aggregate": agg.as_dict(),
        "fps": bench,
    }, indent=2, sort_keys=True, default=float) + "\n")
    print("\n".join(lines[-7:]))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point


def build_parser():
    parser = _Parser(prog="dynsplat",
                     description="Dynamic Gaussian splatting pipeline")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--frames", type=int, default=24)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--motion-amplitude", type=float, default=1.0)
    p.add_argument("--depth-noise", type=float, default=0.0)
    p.add_argument("--occluder-radius", type=float, default=0.0)
    p.add_argument("--two-layer", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("init", help="fuse the initial cloud from depth priors")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("train", help="optimize a scene")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None,
                   help="checkpoint to continue from")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render frames from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", default="all",
                   help='"all" or comma-separated frame indices')
    _add_config_flags(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--repetitions", type=int, default=5)
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _resolve_config(args)
        return args.func(args, cfg)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DynsplatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
