"""End-to-end pipeline: LiDAR projection, up-sampling, PatchMatch, depth and metrics."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import calib_io, evaluation, pms, projection, upsample
from .cost import CostParams
from .errors import ConfigError, LidarPmsError, PipelineError
from .evaluation import MetricReport
from .maps import DepthMap, DisparityMap
from .pms import PmsParams, RefineParams
from .upsample import OutlierParams, UpsampleParams
from .viz import colorize

log = logging.getLogger(__name__)

UPSAMPLERS = ("bi", "bf")
EVAL_MASKS = ("lidar", "none")
_PATH_FIELDS = ("left", "right", "cloud", "gt", "out_dir")
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class EmptyBatchError(LidarPmsError):
    """A batch list contains no frames."""


@dataclass
class PipelineConfig:
    left: str | None = None
    right: str | None = None
    cloud: str | None = None
    calib: tuple[str, ...] = ()
    gt: str | None = None
    out_dir: str = "out"
    # matching cost
    alpha: float = 0.1
    beta: float = 0.0
    gamma: float = 0.9
    delta: float = 10.0
    lambda_col: float = 10.0
    lambda_grad: float = 2.0
    lambda_disp: float = 2.0
    window_radius: int = 5
    window_model: str = "slanted"
    blank_prior_cost: bool = False
    # refinement
    iterations: int = 3
    dn_max: float = 1.0
    dd_stop: float = 0.1
    halving: float = 2.0
    # overlap outliers
    max_disp: float = 3.0
    max_color: float = 10.0
    search_up: int = 30
    search_down: int = 30
    stop_at_nearest: bool = True
    # up-sampling
    max_horizontal_gap: int = 30
    max_vertical_gap: int = 30
    sigma_spatial: float = 8.0
    sigma_color: float = 12.0
    radius: int = 12
    upsampler: str = "bi"
    bf_smooth_sources: bool = False
    # run control
    seed: int = 0
    threads: int = 0
    parallel: bool = True
    d_global_max: float = 128.0
    skip_pms: bool = False
    no_lidar: bool = False
    eval_mask: str = "lidar"
    debug: bool = False

    # -- parameter objects -------------------------------------------------

    def _subset(self, cls):
        return cls(**{f.name: getattr(self, f.name) for f in fields(cls)})

    def cost_params(self) -> CostParams:
        return self._subset(CostParams)

    def refine_params(self) -> RefineParams:
        return self._subset(RefineParams)

    def outlier_params(self) -> OutlierParams:
        return self._subset(OutlierParams)

    def upsample_params(self) -> UpsampleParams:
        return self._subset(UpsampleParams)

    def pms_params(self) -> PmsParams:
        return PmsParams(cost=self.cost_params(), refine=self.refine_params(), d_min=0.0,
                         d_max=float(self.d_global_max), parallel=bool(self.parallel), debug=bool(self.debug))

    def validate(self, check_inputs: bool = True) -> "PipelineConfig":
        """Raise ConfigError for inconsistent settings or missing inputs."""
        if self.no_lidar and self.skip_pms:
            raise ConfigError("--no-lidar and --skip-pms together leave nothing to compute")
        if self.upsampler not in UPSAMPLERS:
            raise ConfigError(f"upsampler must be one of {UPSAMPLERS}, got {self.upsampler!r}")
        if self.eval_mask not in EVAL_MASKS:
            raise ConfigError(f"eval_mask must be one of {EVAL_MASKS}, got {self.eval_mask!r}")
        if self.threads < 0:
            raise ConfigError("threads must be >= 0 (0 = all cores)")
        try:
            self.cost_params(), self.pms_params(), self.outlier_params(), self.upsample_params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if check_inputs:
            required = ["left", "right"] + ([] if self.no_lidar else ["cloud"])
            for name in required:
                if not getattr(self, name):
                    raise ConfigError(f"missing required input '{name}'")
            if not self.calib:
                raise ConfigError("missing required input 'calib'")
            for p in self.input_paths():
                if not Path(p).is_file():
                    raise ConfigError(f"input file not found: {p}")
        return self

    def input_paths(self) -> list[str]:
        paths = [p for p in (self.left, self.right, self.gt) if p]
        if self.cloud:
            paths.append(self.cloud)
        return paths + list(self.calib)

    # -- serialization ------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, tuple):
                value = ",".join(value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def updated(self, values: dict) -> "PipelineConfig":
        """Copy with ``values`` (strings or typed) coerced and applied."""
        known = {f.name: f for f in fields(self)}
        changes = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown configuration key {key!r}")
            changes[key] = _coerce(key, raw, getattr(PipelineConfig, key, None) if key != "calib" else ())
        return replace(self, **changes)


def _coerce(key: str, raw, default):
    if key == "calib":
        if isinstance(raw, str):
            raw = [p for p in raw.split(",")]
        return tuple(str(p).strip() for p in raw if str(p).strip())
    if key in _PATH_FIELDS:
        return None if raw is None else str(raw)
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None
    return text.lower() if key in ("upsampler", "window_model", "eval_mask") else text


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def load_config(path: str | Path, base: PipelineConfig | None = None) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return (base or PipelineConfig()).updated(parse_config_text(text, str(path)))


# ---------------------------------------------------------------------------
# Single frame
# ---------------------------------------------------------------------------


@dataclass
class PipelineResult:
    disparity: DisparityMap
    depth: DepthMap
    depth_path: Path
    report: MetricReport | None
    images: dict[str, Path]
    stats: dict = field(default_factory=dict)


class _Stages:
    """Runs named stages, wraps their failures and tracks files written."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.created_dir = not out_dir.exists()
        self.written: list[Path] = []
        self.timings: dict[str, float] = {}

    def run(self, name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            result = fn(*args, **kwargs)
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(name, exc) from exc
        self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0
        log.debug("stage %s: %.3f s", name, self.timings[name])
        return result

    def path(self, name: str) -> Path:
        p = self.out_dir / name
        self.written.append(p)
        return p

    def cleanup(self) -> None:
        for p in self.written:
            p.unlink(missing_ok=True)
        if self.created_dir and self.out_dir.exists() and not any(self.out_dir.iterdir()):
            self.out_dir.rmdir()


def _load_inputs(cfg: PipelineConfig):
    left = calib_io.read_rgb(cfg.left)
    right = calib_io.read_rgb(cfg.right)
    if left.shape != right.shape:
        raise calib_io.FormatError(f"left {left.shape} and right {right.shape} images differ in size")
    h, w = left.shape[:2]
    calib = calib_io.read_calibration(cfg.calib, image_size=(w, h))
    if calib.image_size != (w, h):
        raise calib_io.FormatError(f"calibration is for {calib.image_size}, images are {(w, h)}")
    cloud = calib_io.read_point_cloud(cfg.cloud) if cfg.cloud else None
    gt = calib_io.read_depth_png(cfg.gt) if cfg.gt else None
    if gt is not None and gt.shape != (h, w):
        raise calib_io.FormatError(f"ground truth is {gt.shape}, images are {(h, w)}")
    return left, right, calib, cloud, gt


def _project(cloud, calib, d_max):
    rings = projection.assign_rings(cloud)
    return projection.project_points(cloud, calib, rings=rings, d_max=d_max)


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    """Run one frame and write its depth raster, previews and (with GT) metrics.

    Files are written to ``config.out_dir``; if any stage fails, the files
    written so far are removed and a PipelineError naming the stage is raised.
    """
    cfg = config.validate()
    out = Path(cfg.out_dir)
    stages = _Stages(out)
    try:
        return _run(cfg, stages)
    except BaseException:
        stages.cleanup()
        raise


def _run(cfg: PipelineConfig, st: _Stages) -> PipelineResult:
    pms.set_threads(cfg.threads or None)
    st.run("prepare_output", st.out_dir.mkdir, parents=True, exist_ok=True)
    left, right, calib, cloud, gt = st.run("load", _load_inputs, cfg)
    d_max = float(cfg.d_global_max)
    stats: dict = {}
    images: dict[str, Path] = {}

    def preview(name, disp):
        p = st.path(f"viz_{name}.png")
        st.run("write_outputs", calib_io.write_rgb, colorize(disp, d_max), p)
        images[name] = p

    sparse = None
    if cloud is not None:
        sparse = st.run("project", _project, cloud, calib, d_max)
        stats["projection"] = dict(sparse.stats)

    prior = cleaned = None
    if not cfg.no_lidar:
        completed = st.run("complete_scan_lines", upsample.complete_scan_lines, sparse, cfg.upsample_params())
        cleaned = st.run("remove_overlap_outliers", upsample.remove_overlap_outliers, completed, left,
                         cfg.outlier_params())
        stats["outliers_removed"] = cleaned.stats.get("outliers_removed", 0)
        if cfg.upsampler == "bi":
            prior = st.run("upsample", upsample.upsample_linear, cleaned, cfg.upsample_params())
        else:
            prior = st.run("upsample", upsample.upsample_bilateral, cleaned, left, cfg.upsample_params(),
                           smooth_sources=cfg.bf_smooth_sources)
        preview("sparse", sparse)
        preview("cleaned", cleaned)
        preview("prior", prior)

    if cfg.skip_pms:
        disparity = prior
    else:
        params = cfg.pms_params()
        if cfg.no_lidar:
            bounds = pms.SearchBounds.uniform(left.shape[0], left.shape[1], 0.0, d_max)
        else:
            bounds = st.run("search_bounds", pms.search_bounds, cleaned, (0.0, d_max),
                            max_gap=cfg.max_vertical_gap)
        result = st.run("pms", pms.solve, left, right, prior, cleaned, params, cfg.seed, bounds=bounds)
        disparity = result.disparity
        stats["pms"] = {k: v for k, v in result.stats.items()}
    preview("disparity", disparity)

    depth = st.run("disparity_to_depth", projection.disparity_to_depth, disparity, calib)
    depth_path = st.path("depth.png")
    st.run("write_outputs", calib_io.write_depth_png, depth, depth_path)
    st.run("write_outputs", calib_io.write_disparity_png, disparity, st.path("disparity.png"))
    st.run("write_outputs", st.path("config.txt").write_text, cfg.to_text())

    report = None
    if gt is not None:
        mask = None
        if cfg.eval_mask == "lidar" and sparse is not None:
            mask = evaluation.lidar_coverage_mask(sparse)
        gt_disp = projection.depth_to_disparity(gt, calib)
        report = st.run("evaluate", evaluation.evaluate, depth, gt, disparity, gt_disp, mask)
        st.path("metrics.txt"), st.path("metrics.json")
        st.run("write_outputs", report.write, st.out_dir / "metrics")
    stats["timings_s"] = dict(st.timings)
    return PipelineResult(disparity, depth, depth_path, report, images, stats)


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


@dataclass
class FrameSpec:
    name: str
    left: str
    right: str
    cloud: str | None
    calib: tuple[str, ...]
    gt: str | None = None

    def paths(self) -> list[str]:
        return [p for p in (self.left, self.right, self.cloud, self.gt) if p] + list(self.calib)


def read_frame_list(path: str | Path, require_cloud: bool = True) -> list[FrameSpec]:
    """One frame per line: ``left right cloud calib[,calib2] [gt]``.

    Relative paths are resolved against the list file's directory; ``#``
    starts a comment.  A cloud column of ``-`` means no LiDAR.
    """
    path = Path(path)
    base = path.parent
    frames: list[FrameSpec] = []
    seen: dict[str, int] = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        cols = line.split()
        if len(cols) not in (4, 5):
            raise ConfigError(f"{path}:{n}: expected 4 or 5 columns, got {len(cols)}")

        def res(p):
            return None if p == "-" else str(base / p)

        left, right, cloud = res(cols[0]), res(cols[1]), res(cols[2])
        if cloud is None and require_cloud:
            raise ConfigError(f"{path}:{n}: a point cloud is required unless --no-lidar is set")
        calib = tuple(str(base / c) for c in cols[3].split(","))
        gt = res(cols[4]) if len(cols) == 5 else None
        stem = Path(cols[0]).stem
        seen[stem] = seen.get(stem, 0) + 1
        name = stem if seen[stem] == 1 else f"{stem}_{seen[stem]}"
        frames.append(FrameSpec(name, left, right, cloud, calib, gt))
    return frames


@dataclass
class BatchResult:
    aggregate: MetricReport | None
    reports: dict[str, MetricReport]
    missing: dict[str, list[str]]
    failed: dict[str, str]
    summary_path: Path

    @property
    def ok(self) -> bool:
        return not self.missing and not self.failed


def run_eval_batch(list_file: str | Path, config: PipelineConfig) -> BatchResult:
    """Run every frame of ``list_file`` and aggregate their metrics pixel-weighted.

    Frames with missing inputs or failing stages are recorded and skipped.
    Writes ``summary.csv`` and ``aggregate.{txt,json}`` under ``config.out_dir``.
    """
    config.validate(check_inputs=False)
    frames = read_frame_list(list_file, require_cloud=not config.no_lidar)
    if not frames:
        raise EmptyBatchError(f"{list_file} lists no frames")
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports: dict[str, MetricReport] = {}
    missing: dict[str, list[str]] = {}
    failed: dict[str, str] = {}
    rows = []
    for fr in frames:
        absent = [p for p in fr.paths() if not Path(p).is_file()]
        if absent:
            missing[fr.name] = absent
            log.warning("frame %s: missing %s", fr.name, ", ".join(absent))
            rows.append({"frame": fr.name, "status": "missing", "error": "; ".join(absent)})
            continue
        cfg = replace(config, left=fr.left, right=fr.right, cloud=fr.cloud, calib=fr.calib, gt=fr.gt,
                      out_dir=str(out / fr.name))
        try:
            res = run_pipeline(cfg)
        except (PipelineError, ConfigError) as exc:
            failed[fr.name] = str(exc)
            log.warning("frame %s failed: %s", fr.name, exc)
            rows.append({"frame": fr.name, "status": "failed", "error": str(exc)})
            continue
        row = {"frame": fr.name, "status": "ok", "error": ""}
        if res.report is not None:
            reports[fr.name] = res.report
            row.update(res.report.to_dict())
        rows.append(row)

    aggregate = evaluation.aggregate_reports(reports.values()) if reports else None
    if aggregate is not None:
        aggregate.write(out / "aggregate")
        rows.append({"frame": "ALL", "status": "aggregate", "error": "", **aggregate.to_dict()})
    summary = out / "summary.csv"
    with summary.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["frame", "status", *evaluation.REPORT_FIELDS, "error"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _csv_value(v) for k, v in row.items()})
    return BatchResult(aggregate, reports, missing, failed, summary)


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if np.isfinite(v) else ""
    return v
