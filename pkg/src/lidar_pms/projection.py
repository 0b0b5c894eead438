"""LiDAR-to-image projection and disparity/depth conversion."""

from __future__ import annotations

import logging

import numpy as np

from .calib_io import Calibration, PointCloud
from .maps import DepthMap, DisparityMap, SparseDisparityMap

log = logging.getLogger(__name__)

Z_MIN = 0.5
DISPARITY_EPS = 1e-3
# A backward azimuth step larger than this (rad) after half a revolution starts a new ring.
RING_BACKSTEP = 0.01
# a short or backward step this close to a full turn is the next laser starting
RING_END_WINDOW = 0.35


def _ring_labels(azimuth: np.ndarray) -> tuple[np.ndarray, int]:
    n = azimuth.shape[0]
    labels = np.zeros(n, dtype=np.int32)
    if n < 2:
        return labels, 0
    steps = np.angle(np.exp(1j * np.diff(azimuth)))
    direction = 1.0 if np.median(steps) >= 0 else -1.0
    steps = steps * direction
    forward = steps[steps > 0]
    typical = float(np.median(forward)) if forward.size else 0.0

    ring = 0
    travelled = 0.0
    irregular = 0
    for i, step in enumerate(steps, start=1):
        travelled += step
        if (travelled >= 2 * np.pi - 0.5 * typical
                or (travelled >= np.pi and step < -RING_BACKSTEP)
                or (travelled >= 2 * np.pi - RING_END_WINDOW and step < 0.5 * typical)):
            ring += 1
            travelled = 0.0
        elif step < -RING_BACKSTEP:
            irregular += 1
        labels[i] = ring
    return labels, irregular


def assign_rings(cloud: PointCloud, return_irregular: bool = False):
    """Label each point with the scan line (laser ring) it belongs to.

    Points must be in firing order.  The azimuth is accumulated along the
    sweep; a new ring starts once a full revolution has been travelled, when
    the azimuth jumps backwards after at least half a revolution, or when an
    unusually short step occurs near the end of a revolution (the next laser
    starting just behind the previous one's start).  Labels are
    non-decreasing.  Backward steps that do not start a ring indicate an
    unordered cloud; their count is logged and optionally returned.
    """
    pts = cloud.points
    azimuth = np.arctan2(pts[:, 1].astype(np.float64), pts[:, 0].astype(np.float64))
    labels, irregular = _ring_labels(azimuth)
    if irregular:
        log.warning("ring assignment: %d out-of-order azimuth steps", irregular)
    if return_irregular:
        return labels, irregular
    return labels


def to_camera(cloud: PointCloud, calib: Calibration) -> np.ndarray:
    """LiDAR points in the left rectified camera frame, shape ``(N, 3)``."""
    xyz = cloud.xyz.astype(np.float64)
    return xyz @ calib.rotation.T + calib.translation


def round_half_up(v: np.ndarray) -> np.ndarray:
    return np.floor(v + 0.5).astype(np.int64)


def project_points(
    cloud: PointCloud,
    calib: Calibration,
    rings: np.ndarray | None = None,
    z_min: float = Z_MIN,
    d_max: float | None = None,
) -> SparseDisparityMap:
    """Project a scan into the left image as sparse disparities ``B*F/z``.

    Points closer than ``z_min`` along the optical axis, outside the image, or
    (when ``d_max`` is given) with disparity above ``d_max`` are dropped and
    counted in ``stats``.  When several points fall into one cell the nearest
    (largest disparity) wins and its ring label is kept.
    """
    h, w = calib.height, calib.width
    out = SparseDisparityMap.empty(h, w)
    stats = {"points": len(cloud), "behind": 0, "outside": 0, "too_near": 0, "projected": 0, "cells": 0}
    out.stats = stats
    if len(cloud) == 0:
        return out
    if rings is None:
        rings = assign_rings(cloud)
    rings = np.asarray(rings, dtype=np.int32)

    cam = to_camera(cloud, calib)
    z = cam[:, 2]
    front = z > z_min
    stats["behind"] = int((~front).sum())
    cam, rings = cam[front], rings[front]
    z = cam[:, 2]

    col = round_half_up(calib.fx * cam[:, 0] / z + calib.cx)
    row = round_half_up(calib.fy * cam[:, 1] / z + calib.cy)
    inside = (col >= 0) & (col < w) & (row >= 0) & (row < h)
    stats["outside"] = int((~inside).sum())
    col, row, z, rings = col[inside], row[inside], z[inside], rings[inside]

    disp = calib.bf / z
    if d_max is not None:
        ok = disp <= d_max
        stats["too_near"] = int((~ok).sum())
        col, row, disp, rings = col[ok], row[ok], disp[ok], rings[ok]
    stats["projected"] = int(disp.size)
    if disp.size == 0:
        return out

    flat = row * w + col
    # Largest disparity first, so the first occurrence of each cell is the winner.
    order = np.lexsort((-disp, flat))
    flat_sorted = flat[order]
    first = np.ones(flat_sorted.size, dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    winners = order[first]
    out.values.ravel()[flat[winners]] = disp[winners]
    out.ring.ravel()[flat[winners]] = rings[winners]
    stats["cells"] = int(winners.size)
    log.debug("projection: %s", stats)
    return out


def disparity_to_depth(disparity: DisparityMap, calib: Calibration, eps: float = DISPARITY_EPS) -> DepthMap:
    d = disparity.values
    depth = np.full(d.shape, np.nan)
    ok = np.isfinite(d) & (d > eps)
    depth[ok] = calib.bf / d[ok]
    return DepthMap(depth)


def depth_to_disparity(depth: DepthMap, calib: Calibration, eps: float = 1e-9) -> DisparityMap:
    z = depth.values
    disp = np.full(z.shape, np.nan)
    ok = np.isfinite(z) & (z > eps)
    disp[ok] = calib.bf / z[ok]
    return DisparityMap(disp)
