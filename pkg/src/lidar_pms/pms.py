"""LiDAR-constrained PatchMatch stereo over a per-pixel slanted-plane field.

The engine keeps one plane and its cached window cost per pixel and improves
the field by alternating spatial propagation with randomized plane
refinement.  LiDAR enters twice: the dense prior is part of the cost, and the
sparse scan rows bound the disparity each pixel may take.

Randomness is counter based: every draw is a hash of (seed, pixel,
iteration, phase, draw index), so initialization and refinement give the same
result whether rows run serially or on several threads.
"""

from __future__ import annotations

import logging
import types
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np
from numba import njit, prange

from .cost import NZ_MIN, CostParams, StereoViews, plane_coefficients, window_cost
from .maps import DisparityMap, check_same_shape

log = logging.getLogger(__name__)
# numba probes an old system TBB on import of the parallel backend; the omp/workqueue layers are used instead
warnings.filterwarnings("ignore", message="The TBB threading layer requires")

BOUND_MARGIN = 1.0
_PHASE_INIT = 1
_PHASE_REFINE = 2
_NORMAL_TRIES = 16
# stats columns
_ACCEPTED, _INCREASE, _MISMATCH, _OUT_OF_BOUNDS = range(4)
_CACHE_RTOL = 1e-9


@dataclass(frozen=True)
class RefineParams:
    iterations: int = 3
    dn_max: float = 1.0
    dd_stop: float = 0.1
    halving: float = 2.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not (self.dn_max > 0 and self.dd_stop > 0):
            raise ValueError("refinement thresholds must be positive")
        if not self.halving > 1:
            raise ValueError("halving factor must exceed 1")


@dataclass(frozen=True)
class PmsParams:
    cost: CostParams = CostParams()
    refine: RefineParams = RefineParams()
    d_min: float = 0.0
    d_max: float = 128.0
    nz_min: float = NZ_MIN
    parallel: bool = False
    debug: bool = False

    def __post_init__(self):
        if not 0 <= self.d_min < self.d_max:
            raise ValueError(f"need 0 <= d_min < d_max, got {self.d_min}, {self.d_max}")


@dataclass
class SearchBounds:
    lo: np.ndarray
    hi: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.lo.shape

    @classmethod
    def uniform(cls, height: int, width: int, d_min: float, d_max: float) -> "SearchBounds":
        return cls(np.full((height, width), float(d_min)), np.full((height, width), float(d_max)))


@dataclass
class PlaneField:
    """Plane coefficients ``(a, b, c)``, unit normals and cached costs, all per pixel."""

    abc: np.ndarray
    normal: np.ndarray
    cost: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.cost.shape

    def disparity(self) -> np.ndarray:
        h, w = self.shape
        ys, xs = np.mgrid[0:h, 0:w]
        return self.abc[:, :, 0] * xs + self.abc[:, :, 1] * ys + self.abc[:, :, 2]

    def copy(self) -> "PlaneField":
        return PlaneField(self.abc.copy(), self.normal.copy(), self.cost.copy())

    @classmethod
    def from_planes(cls, abc: np.ndarray, normal: np.ndarray, views: StereoViews,
                    params: "PmsParams" = None) -> "PlaneField":
        """Field with the given planes and freshly computed costs."""
        params = params or PmsParams()
        abc = np.ascontiguousarray(abc, dtype=np.float64)
        check_same_shape(("views", views.shape), ("planes", abc.shape))
        cost = np.empty(abc.shape[:2])
        _recompute_costs(abc, views.kernel_arrays(), params.cost.kernel_args(), cost)
        return cls(abc, np.ascontiguousarray(normal, dtype=np.float64), cost)


@dataclass
class PmsResult:
    disparity: DisparityMap
    field: PlaneField
    stats: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Search bounds
# ---------------------------------------------------------------------------


@njit(cache=True)
def _bounds_kernel(sparse, lo, hi, max_gap, margin):
    h, w = sparse.shape
    for x in range(w):
        y_up = -1
        for y in range(h):
            d = sparse[y, x]
            if np.isnan(d):
                continue
            lo[y, x] = d - margin
            hi[y, x] = d + margin
            if y_up >= 0:
                d_up = sparse[y_up, x]
                low = min(d, d_up) - margin
                high = max(d, d_up) + margin
                for yy in range(y_up + 1, y):
                    if yy - y_up <= max_gap and y - yy <= max_gap:
                        lo[yy, x] = low
                        hi[yy, x] = high
            y_up = y


def search_bounds(
    sparse: DisparityMap,
    global_range: tuple[float, float] = (0.0, 128.0),
    max_gap: int = 30,
    margin: float = BOUND_MARGIN,
) -> SearchBounds:
    """Per-pixel disparity interval implied by the LiDAR scan rows.

    A pixel between two valid cells of its column (each within ``max_gap``
    rows) is bounded by their disparities, a pixel on a valid cell by its own
    disparity, both widened by ``margin``.  Everything else gets the global
    range.  Results are clipped to the global range.
    """
    g_lo, g_hi = float(global_range[0]), float(global_range[1])
    h, w = sparse.shape
    bounds = SearchBounds.uniform(h, w, g_lo, g_hi)
    if sparse.valid_count():
        _bounds_kernel(np.ascontiguousarray(sparse.values), bounds.lo, bounds.hi, int(max_gap), float(margin))
    np.clip(bounds.lo, g_lo, g_hi, out=bounds.lo)
    np.clip(bounds.hi, g_lo, g_hi, out=bounds.hi)
    np.minimum(bounds.lo, bounds.hi, out=bounds.lo)
    return bounds


# ---------------------------------------------------------------------------
# Counter-based random numbers
# ---------------------------------------------------------------------------


@njit(cache=True)
def _mix64(z):
    z = z + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _stream(seed, pixel, iteration, phase):
    k = _mix64(seed)
    k = _mix64(k ^ np.uint64(pixel))
    k = _mix64(k ^ (np.uint64(iteration) << np.uint64(8)) ^ np.uint64(phase))
    return k


@njit(cache=True)
def _uniform(key, counter):
    z = _mix64(key + np.uint64(counter) * np.uint64(0xD1B54A32D192ED03))
    return np.float64(z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def _random_normal(key, counter, nz_min):
    """Uniform sample on the spherical cap ``n_z >= nz_min``."""
    nz = nz_min + (1.0 - nz_min) * _uniform(key, counter)
    phi = 2.0 * np.pi * _uniform(key, counter + 1)
    s = np.sqrt(max(0.0, 1.0 - nz * nz))
    return s * np.cos(phi), s * np.sin(phi), nz


@njit(cache=True)
def _round_into(d, lo, hi):
    r = np.floor(d + 0.5)
    if r > hi:
        r = np.floor(hi)
    if r < lo:
        r = np.ceil(lo)
    if r < lo or r > hi:
        return d
    return r


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def _init_body(abc, nrm, cost, lo, hi, arrays, cp, seed, front_parallel, nz_min):
    h, w = cost.shape
    prior = arrays[5]
    for y in prange(h):
        for x in range(w):
            key = _stream(seed, y * w + x, 0, _PHASE_INIT)
            l = lo[y, x]
            u = hi[y, x]
            p = prior[y, x]
            if np.isnan(p):
                d = l + (u - l) * _uniform(key, 0)
            else:
                d = min(max(p, l), u)
            if front_parallel:
                d = _round_into(d, l, u)
                nx, ny, nz = 0.0, 0.0, 1.0
            else:
                nx, ny, nz = _random_normal(key, 1, nz_min)
            a, b, c = plane_coefficients(x, y, d, nx, ny, nz)
            abc[y, x, 0] = a
            abc[y, x, 1] = b
            abc[y, x, 2] = c
            nrm[y, x, 0] = nx
            nrm[y, x, 1] = ny
            nrm[y, x, 2] = nz
            cost[y, x] = window_cost(x, y, a, b, c, arrays, cp, np.inf)


@njit(cache=True)
def _record(stats, row, x, y, a, b, c, new_cost, old_cost, lo, hi, arrays, cp, debug):
    stats[row, _ACCEPTED] += 1
    if not debug:
        return
    if not new_cost < old_cost:
        stats[row, _INCREASE] += 1
    full = window_cost(x, y, a, b, c, arrays, cp, np.inf)
    if abs(full - new_cost) > _CACHE_RTOL * max(1.0, abs(full)):
        stats[row, _MISMATCH] += 1
    d = a * x + b * y + c
    if d < lo - 1e-9 or d > hi + 1e-9:
        stats[row, _OUT_OF_BOUNDS] += 1


@njit(cache=True)
def _try_neighbour(abc, nrm, cost, lo, hi, arrays, cp, x, y, qx, qy, stats, debug):
    a = abc[qy, qx, 0]
    b = abc[qy, qx, 1]
    c = abc[qy, qx, 2]
    d = a * x + b * y + c
    if d < lo[y, x] or d > hi[y, x]:
        return
    current = cost[y, x]
    cand = window_cost(x, y, a, b, c, arrays, cp, current)
    if cand < current:
        _record(stats, y, x, y, a, b, c, cand, current, lo[y, x], hi[y, x], arrays, cp, debug)
        abc[y, x, 0] = a
        abc[y, x, 1] = b
        abc[y, x, 2] = c
        nrm[y, x, 0] = nrm[qy, qx, 0]
        nrm[y, x, 1] = nrm[qy, qx, 1]
        nrm[y, x, 2] = nrm[qy, qx, 2]
        cost[y, x] = cand


@njit(cache=True)
def _propagate_kernel(abc, nrm, cost, lo, hi, arrays, cp, forward, stats, debug):
    h, w = cost.shape
    if forward:
        for y in range(h):
            for x in range(w):
                if x > 0:
                    _try_neighbour(abc, nrm, cost, lo, hi, arrays, cp, x, y, x - 1, y, stats, debug)
                if y > 0:
                    _try_neighbour(abc, nrm, cost, lo, hi, arrays, cp, x, y, x, y - 1, stats, debug)
    else:
        for y in range(h - 1, -1, -1):
            for x in range(w - 1, -1, -1):
                if x < w - 1:
                    _try_neighbour(abc, nrm, cost, lo, hi, arrays, cp, x, y, x + 1, y, stats, debug)
                if y < h - 1:
                    _try_neighbour(abc, nrm, cost, lo, hi, arrays, cp, x, y, x, y + 1, stats, debug)


def _refine_body(abc, nrm, cost, lo, hi, arrays, cp, seed, iteration, front_parallel, nz_min,
                 dn_start, dd_stop, halving, stats, debug):
    h, w = cost.shape
    for y in prange(h):
        for x in range(w):
            key = _stream(seed, y * w + x, iteration, _PHASE_REFINE)
            counter = 0
            l = lo[y, x]
            u = hi[y, x]
            a = abc[y, x, 0]
            b = abc[y, x, 1]
            c = abc[y, x, 2]
            d = a * x + b * y + c
            nx = nrm[y, x, 0]
            ny = nrm[y, x, 1]
            nz = nrm[y, x, 2]
            current = cost[y, x]
            dd_max = 0.5 * (u - l)
            dn_max = dn_start
            while dd_max >= dd_stop:
                d2 = d + (2.0 * _uniform(key, counter) - 1.0) * dd_max
                counter += 1
                d2 = min(max(d2, l), u)
                if front_parallel:
                    d2 = _round_into(d2, l, u)
                    mx, my, mz = 0.0, 0.0, 1.0
                    skip = d2 == d
                else:
                    mx, my, mz = nx, ny, nz
                    for _ in range(_NORMAL_TRIES):
                        px = nx + (2.0 * _uniform(key, counter) - 1.0) * dn_max
                        py = ny + (2.0 * _uniform(key, counter + 1) - 1.0) * dn_max
                        pz = nz + (2.0 * _uniform(key, counter + 2) - 1.0) * dn_max
                        counter += 3
                        norm = np.sqrt(px * px + py * py + pz * pz)
                        if norm > 0.0 and abs(pz) >= nz_min * norm:
                            mx, my, mz = px / norm, py / norm, pz / norm
                            break
                    skip = False
                if not skip:
                    a2, b2, c2 = plane_coefficients(x, y, d2, mx, my, mz)
                    cand = window_cost(x, y, a2, b2, c2, arrays, cp, current)
                    if cand < current:
                        _record(stats, y, x, y, a2, b2, c2, cand, current, l, u, arrays, cp, debug)
                        current = cand
                        d = d2
                        nx, ny, nz = mx, my, mz
                        a, b, c = a2, b2, c2
                dd_max /= halving
                dn_max /= halving
            abc[y, x, 0] = a
            abc[y, x, 1] = b
            abc[y, x, 2] = c
            nrm[y, x, 0] = nx
            nrm[y, x, 1] = ny
            nrm[y, x, 2] = nz
            cost[y, x] = current


def _renamed(func, suffix):
    twin = types.FunctionType(func.__code__, func.__globals__, func.__name__ + suffix, func.__defaults__)
    twin.__qualname__ = func.__qualname__ + suffix
    return twin


_init_serial = njit(cache=True)(_renamed(_init_body, "_serial"))
_init_parallel = njit(cache=True, parallel=True)(_renamed(_init_body, "_parallel"))
_refine_serial = njit(cache=True)(_renamed(_refine_body, "_serial"))
_refine_parallel = njit(cache=True, parallel=True)(_renamed(_refine_body, "_parallel"))


@njit(cache=True)
def _recompute_costs(abc, arrays, cp, out):
    h, w = out.shape
    for y in range(h):
        for x in range(w):
            out[y, x] = window_cost(x, y, abc[y, x, 0], abc[y, x, 1], abc[y, x, 2], arrays, cp, np.inf)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def _seed64(seed: int) -> np.uint64:
    return np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)


def _new_stats(height: int) -> np.ndarray:
    return np.zeros((height, 4), dtype=np.int64)


def _merge_stats(into: dict, stats: np.ndarray, phase: str) -> None:
    totals = stats.sum(axis=0)
    into[f"{phase}_accepted"] = into.get(f"{phase}_accepted", 0) + int(totals[_ACCEPTED])
    into["cost_increases"] = into.get("cost_increases", 0) + int(totals[_INCREASE])
    into["cache_mismatches"] = into.get("cache_mismatches", 0) + int(totals[_MISMATCH])
    into["bounds_violations"] = into.get("bounds_violations", 0) + int(totals[_OUT_OF_BOUNDS])


def initialize(
    views: StereoViews,
    bounds: SearchBounds,
    seed: int,
    params: PmsParams = PmsParams(),
) -> PlaneField:
    """Assign every pixel a plane and fill the cost cache.

    The disparity comes from the dense prior where it exists (clamped to the
    pixel's bounds), otherwise uniformly from the bounds.  Slanted mode draws
    a random normal; front-parallel mode uses ``(0, 0, 1)`` and integer
    disparities.
    """
    check_same_shape(("views", views.shape), ("bounds", bounds.shape))
    h, w = views.shape
    fld = PlaneField(np.zeros((h, w, 3)), np.zeros((h, w, 3)), np.zeros((h, w)))
    kernel = _init_parallel if params.parallel else _init_serial
    kernel(fld.abc, fld.normal, fld.cost, bounds.lo, bounds.hi, views.kernel_arrays(), params.cost.kernel_args(),
           _seed64(seed), params.cost.front_parallel, float(params.nz_min))
    return fld


def propagate(
    fld: PlaneField,
    views: StereoViews,
    bounds: SearchBounds,
    iteration: int,
    params: PmsParams = PmsParams(),
    stats: dict | None = None,
) -> PlaneField:
    """One spatial propagation sweep, in place.

    Odd iterations (1-based) sweep from the top-left and try the left and
    upper neighbours' planes; even iterations sweep from the bottom-right and
    try the right and lower neighbours.  A neighbour's plane is taken only if
    it lowers the cost and its disparity here stays within this pixel's bounds.
    """
    counts = _new_stats(fld.shape[0])
    _propagate_kernel(fld.abc, fld.normal, fld.cost, bounds.lo, bounds.hi, views.kernel_arrays(),
                      params.cost.kernel_args(), iteration % 2 == 1, counts, params.debug)
    if stats is not None:
        _merge_stats(stats, counts, "propagation")
    return fld


def refine(
    fld: PlaneField,
    views: StereoViews,
    bounds: SearchBounds,
    seed: int,
    iteration: int,
    params: PmsParams = PmsParams(),
    stats: dict | None = None,
) -> PlaneField:
    """Randomized per-pixel plane perturbation with a halving search radius, in place.

    The disparity radius starts at half the pixel's bound width and the
    normal radius at ``dn_max``; both halve after each draw until the
    disparity radius drops below ``dd_stop``.
    """
    rp = params.refine
    counts = _new_stats(fld.shape[0])
    kernel = _refine_parallel if params.parallel else _refine_serial
    kernel(fld.abc, fld.normal, fld.cost, bounds.lo, bounds.hi, views.kernel_arrays(), params.cost.kernel_args(),
           _seed64(seed), int(iteration), params.cost.front_parallel, float(params.nz_min),
           float(rp.dn_max), float(rp.dd_stop), float(rp.halving), counts, params.debug)
    if stats is not None:
        _merge_stats(stats, counts, "refinement")
    return fld


def refinement_radii(lo: float, hi: float, refine: RefineParams = RefineParams()) -> list[float]:
    """Disparity perturbation radii one pixel with bounds ``[lo, hi]`` goes through."""
    out = []
    dd = 0.5 * (hi - lo)
    while dd >= refine.dd_stop:
        out.append(dd)
        dd /= refine.halving
    return out


def revalidate(fld: PlaneField, views: StereoViews, params: PmsParams = PmsParams()) -> int:
    """Number of pixels whose cached cost disagrees with a fresh evaluation."""
    fresh = np.empty_like(fld.cost)
    _recompute_costs(fld.abc, views.kernel_arrays(), params.cost.kernel_args(), fresh)
    tol = _CACHE_RTOL * np.maximum(1.0, np.abs(fresh))
    return int((np.abs(fresh - fld.cost) > tol).sum())


def solve(
    left: np.ndarray,
    right: np.ndarray,
    prior_dense: DisparityMap | None,
    prior_sparse: DisparityMap | None,
    params: PmsParams = PmsParams(),
    seed: int = 0,
    bounds: SearchBounds | None = None,
    max_gap: int = 30,
) -> PmsResult:
    """Run initialization and ``iterations`` rounds of (propagate, refine).

    ``prior_sparse`` (the cleaned, scan-line-completed LiDAR map) sets the
    search bounds unless ``bounds`` is given; ``prior_dense`` enters the cost.
    Either may be None for pure stereo.
    """
    views = StereoViews.build(left, right, prior_dense, delta=params.cost.delta)
    h, w = views.shape
    if bounds is None:
        if prior_sparse is None:
            bounds = SearchBounds.uniform(h, w, params.d_min, params.d_max)
        else:
            check_same_shape(("left image", (h, w)), ("sparse prior", prior_sparse.shape))
            bounds = search_bounds(prior_sparse, (params.d_min, params.d_max), max_gap=max_gap)
    check_same_shape(("left image", (h, w)), ("bounds", bounds.shape))

    stats: dict = {}
    fld = initialize(views, bounds, seed, params)
    history = [float(fld.cost.sum())]
    if params.debug:
        stats["stale_cache_pixels"] = revalidate(fld, views, params)
    for it in range(1, params.refine.iterations + 1):
        before = fld.cost.copy()
        propagate(fld, views, bounds, it, params, stats)
        refine(fld, views, bounds, seed, it, params, stats)
        history.append(float(fld.cost.sum()))
        if params.debug:
            stats["stale_cache_pixels"] += revalidate(fld, views, params)
            stats["pixels_cost_increased"] = stats.get("pixels_cost_increased", 0) + int((fld.cost > before).sum())
        log.debug("iteration %d: total cost %.6g", it, history[-1])
    stats["total_cost_history"] = history

    disp = np.clip(fld.disparity(), 0.0, params.d_max)
    return PmsResult(DisparityMap(disp), fld, stats)


def run(
    left: np.ndarray,
    right: np.ndarray,
    prior_dense: DisparityMap | None,
    prior_sparse: DisparityMap | None,
    params: PmsParams = PmsParams(),
    seed: int = 0,
    calib=None,
) -> DisparityMap:
    """Dense left-view disparity; see ``solve`` for the full result."""
    if calib is not None:
        check_same_shape(("calibration", (calib.height, calib.width)), ("left image", np.shape(left)))
    return solve(left, right, prior_dense, prior_sparse, params, seed).disparity


def set_threads(n: int | None) -> None:
    """Limit numba worker threads used by the parallel kernels."""
    if n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
