"""Command-line front end: ``lidar-pms run | batch | synth``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 evaluation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .errors import ConfigError, EmptyEvaluationError, LidarPmsError, PipelineError
from .pipeline import PipelineConfig, load_config, run_eval_batch, run_pipeline

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_EVAL = 0, 1, 2, 3

log = logging.getLogger("lidar_pms")

_HELP = {
    "left": "left (reference) image",
    "right": "right image",
    "cloud": "Velodyne .bin point cloud",
    "calib": "calibration file(s); several are merged",
    "gt": "16-bit ground-truth depth PNG",
    "out_dir": "output directory",
    "upsampler": "LiDAR up-sampler: bi (linear) or bf (bilateral)",
    "window_model": "slanted or front_parallel",
    "skip_pms": "emit the up-sampled LiDAR prior as the result",
    "no_lidar": "pure stereo with global disparity bounds",
    "bf_smooth_sources": "let the bilateral up-sampler also filter measured cells",
    "blank_prior_cost": "charge lambda_disp where the LiDAR prior is empty",
    "threads": "worker threads for parallel kernels (0 = all)",
    "d_global_max": "upper disparity bound in px",
    "eval_mask": "lidar: score only rows covered by LiDAR; none: all GT pixels",
}


def _add_config_flags(p: argparse.ArgumentParser, with_inputs: bool) -> None:
    p.add_argument("--config", help="key = value configuration file; flags override it")
    for f in fields(PipelineConfig):
        if not with_inputs and f.name in ("left", "right", "cloud", "calib", "gt"):
            continue
        flag = "--" + f.name.replace("_", "-")
        kw = dict(dest=f.name, default=argparse.SUPPRESS, help=_HELP.get(f.name))
        default = getattr(PipelineConfig, f.name, None)
        if f.name == "calib":
            p.add_argument(flag, nargs="+", **kw)
        elif isinstance(default, bool) and f.name.startswith("no_"):
            # BooleanOptionalAction would read any "--no-" flag as a negation
            p.add_argument(flag, action="store_true", **kw)
        elif isinstance(default, bool):
            p.add_argument(flag, action=argparse.BooleanOptionalAction, **kw)
        elif f.name == "upsampler":
            p.add_argument(flag, choices=("bi", "bf"), type=str.lower, **kw)
        elif f.name == "window_model":
            p.add_argument(flag, choices=("slanted", "front_parallel"), **kw)
        elif f.name == "eval_mask":
            p.add_argument(flag, choices=("lidar", "none"), **kw)
        else:
            p.add_argument(flag, metavar=f.name.upper(), **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lidar-pms", description="LiDAR-guided PatchMatch stereo depth estimation")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="process one frame")
    _add_config_flags(run, with_inputs=True)

    batch = sub.add_parser("batch", help="process and score a list of frames")
    batch.add_argument("list_file", help="lines of: left right cloud calib[,calib] [gt]")
    _add_config_flags(batch, with_inputs=False)

    synth = sub.add_parser("synth", help="render synthetic street frames with ground truth")
    synth.add_argument("--out-dir", required=True)
    synth.add_argument("--frames", type=int, default=1)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--scale", type=float, default=0.5, help="image scale relative to 1242x375")
    return parser


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    names = {f.name for f in fields(PipelineConfig)}
    overrides = {k: v for k, v in vars(args).items() if k in names}
    return cfg.updated(overrides)


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, PipelineError):
        return EXIT_EVAL if isinstance(exc.cause, EmptyEvaluationError) else EXIT_DATA
    if isinstance(exc, EmptyEvaluationError):
        return EXIT_EVAL
    return EXIT_DATA


def _cmd_run(args) -> int:
    cfg = config_from_args(args)
    res = run_pipeline(cfg)
    print(f"depth written to {res.depth_path}")
    if res.report is not None:
        print(res.report.to_text(), end="")
    return EXIT_OK


def _cmd_batch(args) -> int:
    cfg = config_from_args(args)
    res = run_eval_batch(args.list_file, cfg)
    for name, paths in res.missing.items():
        print(f"missing: {name}: {', '.join(paths)}", file=sys.stderr)
    for name, err in res.failed.items():
        print(f"failed: {name}: {err}", file=sys.stderr)
    if res.aggregate is not None:
        print(res.aggregate.to_text(), end="")
    print(f"summary written to {res.summary_path}")
    return EXIT_OK if res.ok else EXIT_DATA


def _cmd_synth(args) -> int:
    from . import calib_io, synthetic

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(args.frames):
        name = f"{i:06d}"
        fr = synthetic.render_street_scene(seed=args.seed + i, scale=args.scale)
        calib_io.write_rgb(fr.left, out / f"{name}_left.png")
        calib_io.write_rgb(fr.right, out / f"{name}_right.png")
        calib_io.write_point_cloud(fr.cloud, out / f"{name}.bin")
        calib_io.write_calibration(fr.calib, out / f"{name}_calib.txt")
        calib_io.write_depth_png(fr.gt_depth, out / f"{name}_gt.png")
        lines.append(f"{name}_left.png {name}_right.png {name}.bin {name}_calib.txt {name}_gt.png")
    (out / "frames.txt").write_text("\n".join(lines) + "\n")
    print(json.dumps({"frames": args.frames, "list": str(out / "frames.txt")}))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    handler = {"run": _cmd_run, "batch": _cmd_batch, "synth": _cmd_synth}[args.command]
    try:
        return handler(args)
    except (LidarPmsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
