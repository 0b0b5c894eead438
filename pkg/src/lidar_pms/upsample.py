"""Densification of the sparse LiDAR disparity map.

The linear up-sampler (``BI*``) runs three passes: scan-line completion
along x, removal of overlap outliers, then vertical interpolation between
the nearest scan rows.  ``upsample_bilateral`` is the bilateral-filter
baseline (``BF*``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .maps import DisparityMap, SparseDisparityMap, check_same_shape


@dataclass(frozen=True)
class OutlierParams:
    max_disp: float = 3.0
    max_color: float = 10.0
    search_up: int = 30
    search_down: int = 30
    # Only the nearest valid cell above/below is examined when True.
    stop_at_nearest: bool = True

    def __post_init__(self):
        for name in ("max_disp", "max_color", "search_up", "search_down"):
            if not getattr(self, name) > 0:
                raise ValueError(f"OutlierParams.{name} must be positive")


@dataclass(frozen=True)
class UpsampleParams:
    max_horizontal_gap: int = 30
    max_vertical_gap: int = 30
    sigma_spatial: float = 8.0
    sigma_color: float = 12.0
    radius: int = 12

    def __post_init__(self):
        for name in ("max_horizontal_gap", "max_vertical_gap", "sigma_spatial", "sigma_color", "radius"):
            if not getattr(self, name) > 0:
                raise ValueError(f"UpsampleParams.{name} must be positive")


# ---------------------------------------------------------------------------
# Scan-line completion
# ---------------------------------------------------------------------------


@njit(cache=True)
def _fill_scan_lines(rings, cols, rows, disps, out_d, out_r, was_valid, max_gap):
    n = rings.shape[0]
    for i in range(n - 1):
        if rings[i] != rings[i + 1]:
            continue
        x1, x2 = cols[i], cols[i + 1]
        gap = x2 - x1
        if gap <= 1 or gap > max_gap:
            continue
        y1, y2 = rows[i], rows[i + 1]
        d1, d2 = disps[i], disps[i + 1]
        for x in range(x1 + 1, x2):
            t = (x - x1) / gap
            y = int(np.floor(y1 + t * (y2 - y1) + 0.5))
            if was_valid[y, x]:
                continue
            d = d1 + t * (d2 - d1)
            cur = out_d[y, x]
            if np.isnan(cur) or d > cur:
                out_d[y, x] = d
                out_r[y, x] = rings[i]


def complete_scan_lines(sparse: SparseDisparityMap, params: UpsampleParams = UpsampleParams()) -> SparseDisparityMap:
    """Fill x-gaps of at most ``max_horizontal_gap`` px between consecutive cells of one ring.

    Filled cells take the linearly interpolated disparity (and row) of the
    two bracketing cells and inherit their ring.  Measured cells are never
    modified; where two rings fill the same empty cell the nearer value wins.
    """
    valid = sparse.valid & (sparse.ring >= 0)
    rows, cols = np.nonzero(valid)
    rings = sparse.ring[rows, cols]
    order = np.lexsort((rows, cols, rings))
    out = sparse.copy()
    _fill_scan_lines(
        rings[order].astype(np.int64), cols[order].astype(np.int64), rows[order].astype(np.int64),
        sparse.values[rows, cols][order], out.values, out.ring, sparse.valid, int(params.max_horizontal_gap),
    )
    return out


# ---------------------------------------------------------------------------
# Overlap-outlier removal
# ---------------------------------------------------------------------------


@njit(cache=True)
def _color_l1(image, y1, x1, y2, x2):
    s = 0.0
    for ch in range(3):
        s += abs(image[y1, x1, ch] - image[y2, x2, ch])
    return s


@njit(cache=True)
def _nearer_neighbour(disp, image, y, x, step, reach, max_disp, max_color, stop_at_nearest):
    h = disp.shape[0]
    d0 = disp[y, x]
    for k in range(1, reach + 1):
        yy = y + step * k
        if yy < 0 or yy >= h:
            return False
        v = disp[yy, x]
        if np.isnan(v):
            continue
        if v - d0 > max_disp and _color_l1(image, yy, x, y, x) < max_color:
            return True
        if stop_at_nearest:
            return False
    return False


@njit(cache=True)
def _remove_outliers(disp, image, max_disp, max_color, up, down, stop_at_nearest):
    h, w = disp.shape
    remove = np.zeros((h, w), dtype=np.bool_)
    for y in range(h):
        for x in range(w):
            if np.isnan(disp[y, x]):
                continue
            if not _nearer_neighbour(disp, image, y, x, -1, up, max_disp, max_color, stop_at_nearest):
                continue
            if _nearer_neighbour(disp, image, y, x, 1, down, max_disp, max_color, stop_at_nearest):
                remove[y, x] = True
    return remove


def remove_overlap_outliers(
    sparse: SparseDisparityMap,
    image: np.ndarray,
    params: OutlierParams = OutlierParams(),
) -> SparseDisparityMap:
    """Clear cells that a nearer, similarly coloured cell brackets from above and below.

    Such cells are far-surface returns seen by the LiDAR past an occluding
    edge that the camera cannot see.  Every decision reads the input map, so
    removals never cascade.
    """
    image = np.asarray(image)
    check_same_shape(("disparity map", sparse.shape), ("image", image.shape))
    remove = _remove_outliers(
        sparse.values, image.astype(np.float64), float(params.max_disp), float(params.max_color),
        int(params.search_up), int(params.search_down), bool(params.stop_at_nearest),
    )
    out = sparse.copy()
    out.values[remove] = np.nan
    out.ring[remove] = -1
    out.stats["outliers_removed"] = int(remove.sum())
    return out


# ---------------------------------------------------------------------------
# Vertical linear interpolation (BI*)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _interp_columns(src, out, max_gap):
    h, w = src.shape
    for x in range(w):
        y_up = -1
        for y in range(h):
            if np.isnan(src[y, x]):
                continue
            if y_up >= 0 and y - y_up > 1:
                y_down = y
                span = y_down - y_up
                d_up = src[y_up, x]
                d_down = src[y_down, x]
                for yy in range(y_up + 1, y_down):
                    if yy - y_up > max_gap or y_down - yy > max_gap:
                        continue
                    out[yy, x] = ((yy - y_up) / span) * d_down + ((y_down - yy) / span) * d_up
            y_up = y


def upsample_linear(sparse: DisparityMap, params: UpsampleParams = UpsampleParams()) -> DisparityMap:
    """Interpolate each empty pixel from the nearest valid cells above and below it.

    A pixel is filled only when both bracketing cells lie within
    ``max_vertical_gap`` rows; measured cells pass through unchanged.
    """
    src = np.ascontiguousarray(sparse.values)
    out = src.copy()
    _interp_columns(src, out, int(params.max_vertical_gap))
    return DisparityMap(out)


# ---------------------------------------------------------------------------
# Bilateral up-sampling (BF*)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _bilateral(src, image, radius, sigma_s, sigma_c, smooth_sources):
    h, w = src.shape
    out = src.copy()
    inv_s = 1.0 / (2.0 * sigma_s * sigma_s)
    inv_c = 1.0 / (2.0 * sigma_c * sigma_c)
    for y in range(h):
        for x in range(w):
            if not np.isnan(src[y, x]) and not smooth_sources:
                continue
            acc = 0.0
            wsum = 0.0
            for yy in range(max(0, y - radius), min(h, y + radius + 1)):
                dy = yy - y
                for xx in range(max(0, x - radius), min(w, x + radius + 1)):
                    v = src[yy, xx]
                    if np.isnan(v):
                        continue
                    dx = xx - x
                    dc = _color_l1(image, y, x, yy, xx)
                    wt = np.exp(-(dx * dx + dy * dy) * inv_s) * np.exp(-dc * dc * inv_c)
                    acc += wt * v
                    wsum += wt
            if wsum >= 1e-6:
                out[y, x] = acc / wsum
            elif smooth_sources:
                out[y, x] = src[y, x]
            else:
                out[y, x] = np.nan
    return out


def upsample_bilateral(
    sparse: DisparityMap,
    image: np.ndarray,
    params: UpsampleParams = UpsampleParams(),
    smooth_sources: bool = False,
) -> DisparityMap:
    """Fill empty pixels with the colour- and distance-weighted mean of nearby cells.

    With ``smooth_sources`` the measured cells are filtered as well, which is
    the classic formulation; by default they are kept as measured.
    """
    image = np.asarray(image)
    check_same_shape(("disparity map", sparse.shape), ("image", image.shape))
    out = _bilateral(
        np.ascontiguousarray(sparse.values), image.astype(np.float64), int(params.radius),
        float(params.sigma_spatial), float(params.sigma_color), bool(smooth_sources),
    )
    return DisparityMap(out)
