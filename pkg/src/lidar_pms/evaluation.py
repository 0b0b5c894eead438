"""Depth and disparity error metrics in the KITTI depth-benchmark units."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyEvaluationError
from .maps import DepthMap, DisparityMap, check_same_shape

DEFAULT_THRESHOLDS = (2.0, 3.0, 5.0)


@dataclass
class MetricReport:
    rmse_mm: float | None = None
    mae_mm: float | None = None
    irmse: float | None = None
    imae: float | None = None
    err_gt_2px: float | None = None
    err_gt_3px: float | None = None
    err_gt_5px: float | None = None
    evaluated_pixels: int = 0
    disparity_pixels: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        rows = [
            ("RMSE (mm)", self.rmse_mm), ("MAE (mm)", self.mae_mm),
            ("iRMSE (1/km)", self.irmse), ("iMAE (1/km)", self.imae),
            (">2px", self.err_gt_2px), (">3px", self.err_gt_3px), (">5px", self.err_gt_5px),
        ]
        lines = []
        for name, value in rows:
            if value is None:
                continue
            if name.startswith(">"):
                lines.append(f"{name:<14}{100.0 * value:10.2f} %")
            else:
                lines.append(f"{name:<14}{value:12.3f}")
        lines.append(f"{'pixels':<14}{self.evaluated_pixels:10d}")
        return "\n".join(lines) + "\n"

    def write(self, stem: str | Path) -> tuple[Path, Path]:
        """Write ``<stem>.txt`` (readable) and ``<stem>.json`` (key-value)."""
        stem = Path(stem)
        txt, js = stem.with_suffix(".txt"), stem.with_suffix(".json")
        txt.write_text(self.to_text())
        js.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return txt, js


def _mask(est: np.ndarray, gt: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    check_same_shape(("estimate", est.shape), ("ground truth", gt.shape))
    m = np.isfinite(est) & np.isfinite(gt) & (gt > 0)
    if mask is not None:
        check_same_shape(("estimate", est.shape), ("mask", np.shape(mask)))
        m &= np.asarray(mask, dtype=bool)
    if not m.any():
        raise EmptyEvaluationError("no pixel is valid in both estimate and ground truth")
    return m


def depth_metrics(est: DepthMap, gt: DepthMap, mask: np.ndarray | None = None) -> MetricReport:
    """RMSE/MAE in mm and inverse-depth iRMSE/iMAE in 1/km over commonly valid pixels.

    Estimated depths that are not positive count as invalid.
    """
    e = np.where(est.values > 0, est.values, np.nan)
    m = _mask(e, gt.values, mask)
    ze, zg = e[m], gt.values[m]
    err_mm = (ze - zg) * 1000.0
    inv_err = (1.0 / ze - 1.0 / zg) * 1000.0
    return MetricReport(
        rmse_mm=float(np.sqrt(np.mean(err_mm ** 2))),
        mae_mm=float(np.mean(np.abs(err_mm))),
        irmse=float(np.sqrt(np.mean(inv_err ** 2))),
        imae=float(np.mean(np.abs(inv_err))),
        evaluated_pixels=int(m.sum()),
    )


def disparity_error_rates(
    est: DisparityMap,
    gt: DisparityMap,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    mask: np.ndarray | None = None,
) -> dict[float, float]:
    """Fraction of commonly valid pixels whose absolute disparity error exceeds each threshold."""
    m = _mask(est.values, gt.values, mask)
    err = np.abs(est.values[m] - gt.values[m])
    return {float(t): float(np.mean(err > t)) for t in thresholds}


def evaluate(
    est_depth: DepthMap | None = None,
    gt_depth: DepthMap | None = None,
    est_disp: DisparityMap | None = None,
    gt_disp: DisparityMap | None = None,
    mask: np.ndarray | None = None,
) -> MetricReport:
    """Fill whichever halves of a report the given maps allow."""
    report = MetricReport()
    if est_depth is not None and gt_depth is not None:
        report = depth_metrics(est_depth, gt_depth, mask)
    if est_disp is not None and gt_disp is not None:
        rates = disparity_error_rates(est_disp, gt_disp, DEFAULT_THRESHOLDS, mask)
        report.err_gt_2px, report.err_gt_3px, report.err_gt_5px = rates[2.0], rates[3.0], rates[5.0]
        report.disparity_pixels = int(_mask(est_disp.values, gt_disp.values, mask).sum())
    return report


def lidar_coverage_mask(sparse: DisparityMap) -> np.ndarray:
    """Pixels between the top-most and bottom-most LiDAR cell of their column."""
    valid = sparse.valid
    h = valid.shape[0]
    any_valid = valid.any(axis=0)
    top = np.where(any_valid, valid.argmax(axis=0), h)
    bottom = np.where(any_valid, h - 1 - valid[::-1].argmax(axis=0), -1)
    rows = np.arange(h)[:, None]
    return (rows >= top[None, :]) & (rows <= bottom[None, :])


def aggregate_reports(reports: Iterable[MetricReport]) -> MetricReport:
    """Pixel-weighted combination of per-frame reports."""
    reports = list(reports)
    if not reports:
        raise EmptyEvaluationError("no reports to aggregate")
    out = MetricReport()
    depth = [r for r in reports if r.mae_mm is not None and r.evaluated_pixels > 0]
    if depth:
        n = np.array([r.evaluated_pixels for r in depth], dtype=np.float64)
        wts = n / n.sum()
        out.mae_mm = float(np.dot(wts, [r.mae_mm for r in depth]))
        out.imae = float(np.dot(wts, [r.imae for r in depth]))
        out.rmse_mm = math.sqrt(float(np.dot(wts, [r.rmse_mm ** 2 for r in depth])))
        out.irmse = math.sqrt(float(np.dot(wts, [r.irmse ** 2 for r in depth])))
        out.evaluated_pixels = int(n.sum())
    disp = [r for r in reports if r.err_gt_2px is not None and r.disparity_pixels > 0]
    if disp:
        n = np.array([r.disparity_pixels for r in disp], dtype=np.float64)
        wts = n / n.sum()
        out.err_gt_2px = float(np.dot(wts, [r.err_gt_2px for r in disp]))
        out.err_gt_3px = float(np.dot(wts, [r.err_gt_3px for r in disp]))
        out.err_gt_5px = float(np.dot(wts, [r.err_gt_5px for r in disp]))
        out.disparity_pixels = int(n.sum())
    return out


REPORT_FIELDS = [f.name for f in fields(MetricReport)]
