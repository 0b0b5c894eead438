"""Slanted disparity planes and the LiDAR-augmented window matching cost.

A plane through ``(x, y, d)`` with normal ``n`` assigns every pixel the
disparity ``a*x + b*y + c``.  The cost of a plane at pixel ``p`` sums, over a
square window, a colour-similarity weight times a truncated dissimilarity of
colour, x-gradient and deviation from the LiDAR prior.

The numba kernels here are shared with the PatchMatch engine; the Python
wrappers are the public, checked entry points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import DegenerateNormalError, FormatError
from .maps import DisparityMap, check_same_shape

NZ_MIN = 0.05
WINDOW_MODELS = ("slanted", "front_parallel")
MAX_L1 = 3 * 255


@dataclass(frozen=True)
class CostParams:
    alpha: float = 0.1
    beta: float = 0.0
    gamma: float = 0.9
    delta: float = 10.0
    lambda_col: float = 10.0
    lambda_grad: float = 2.0
    lambda_disp: float = 2.0
    window_radius: int = 5
    window_model: str = "slanted"
    # Charge the full disparity cap where the prior is blank instead of nothing.
    blank_prior_cost: bool = False

    def __post_init__(self):
        weights = (self.alpha, self.beta, self.gamma)
        if min(weights) < 0:
            raise ValueError(f"cost weights must be non-negative, got {weights}")
        if abs(sum(weights) - 1.0) > 1e-9:
            raise ValueError(f"alpha + beta + gamma must equal 1, got {sum(weights)!r}")
        for name in ("delta", "lambda_col", "lambda_grad", "lambda_disp"):
            if not getattr(self, name) > 0:
                raise ValueError(f"CostParams.{name} must be positive")
        if self.window_radius < 0:
            raise ValueError("window_radius must be >= 0")
        if self.window_model not in WINDOW_MODELS:
            raise ValueError(f"window_model must be one of {WINDOW_MODELS}, got {self.window_model!r}")

    @property
    def front_parallel(self) -> bool:
        return self.window_model == "front_parallel"

    @property
    def pixel_cost_cap(self) -> float:
        return self.alpha * self.lambda_col + self.beta * self.lambda_grad + self.gamma * self.lambda_disp

    def kernel_args(self) -> tuple:
        blank = self.lambda_disp if self.blank_prior_cost else 0.0
        return (
            int(self.window_radius), float(self.alpha), float(self.beta), float(self.gamma),
            float(self.lambda_col), float(self.lambda_grad), float(self.lambda_disp), float(blank),
        )


# ---------------------------------------------------------------------------
# Planes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Plane:
    a: float
    b: float
    c: float
    normal: tuple[float, float, float]

    def disparity(self, x, y):
        return plane_disparity(self, x, y)


@njit(cache=True)
def plane_coefficients(x, y, d, nx, ny, nz):
    a = -nx / nz
    b = -ny / nz
    c = (nx * x + ny * y + nz * d) / nz
    return a, b, c


def plane_from_point_normal(x: float, y: float, d: float, n, nz_min: float = NZ_MIN) -> Plane:
    """Plane through ``(x, y, d)`` with normal ``n``.

    Raises DegenerateNormalError when the unit normal's z component is below
    ``nz_min`` in magnitude, i.e. the plane is nearly parallel to the
    disparity axis.
    """
    n = np.asarray(n, dtype=np.float64)
    norm = float(np.linalg.norm(n))
    if norm == 0.0:
        raise DegenerateNormalError("zero normal vector")
    n = n / norm
    if abs(n[2]) < nz_min:
        raise DegenerateNormalError(f"|n_z| = {abs(n[2]):.3g} is below {nz_min}")
    a, b, c = plane_coefficients(float(x), float(y), float(d), n[0], n[1], n[2])
    return Plane(a, b, c, (float(n[0]), float(n[1]), float(n[2])))


def fronto_parallel_plane(d: float) -> Plane:
    return Plane(0.0, 0.0, float(d), (0.0, 0.0, 1.0))


def plane_disparity(plane: Plane, x, y):
    return plane.a * x + plane.b * y + plane.c


# ---------------------------------------------------------------------------
# Per-pixel terms
# ---------------------------------------------------------------------------


def color_weight(color_p, color_q, delta: float = 10.0) -> float:
    """``exp(-|I_p - I_q|_1 / delta)``: near 1 for similar colours."""
    dist = float(np.abs(np.asarray(color_p, dtype=np.float64) - np.asarray(color_q, dtype=np.float64)).sum())
    return math.exp(-dist / delta)


def pixel_dissimilarity(color_diff: float, grad_diff: float, prior, d: float, params: CostParams = CostParams()) -> float:
    """Truncated dissimilarity for already-sampled L1 colour and gradient differences.

    ``prior`` is the LiDAR disparity at the window pixel, or None/NaN when
    there is none; ``d`` is the plane's disparity there.  Pass
    ``color_diff=None`` for a correspondence that falls outside the other
    image, which is charged the colour and gradient caps.
    """
    if color_diff is None:
        col, grad = params.lambda_col, params.lambda_grad
    else:
        col = min(float(color_diff), params.lambda_col)
        grad = min(float(grad_diff), params.lambda_grad)
    if prior is None or not np.isfinite(prior):
        disp = params.lambda_disp if params.blank_prior_cost else 0.0
    else:
        disp = min(abs(float(prior) - d), params.lambda_disp)
    return params.alpha * col + params.beta * grad + params.gamma * disp


def gradient_x(image: np.ndarray) -> np.ndarray:
    """x-derivative of the luma image: central differences, one-sided at the borders."""
    img = np.asarray(image, dtype=np.float64)
    gray = 0.299 * img[:, :, 0] + 0.587 * img[:, :, 1] + 0.114 * img[:, :, 2]
    grad = np.zeros_like(gray)
    if gray.shape[1] < 2:
        return grad
    grad[:, 1:-1] = 0.5 * (gray[:, 2:] - gray[:, :-2])
    grad[:, 0] = gray[:, 1] - gray[:, 0]
    grad[:, -1] = gray[:, -1] - gray[:, -2]
    return grad


# ---------------------------------------------------------------------------
# Window aggregation
# ---------------------------------------------------------------------------


@dataclass
class StereoViews:
    """Pre-processed arrays the cost kernels read."""

    left: np.ndarray
    right: np.ndarray
    left_i: np.ndarray
    grad_left: np.ndarray
    grad_right: np.ndarray
    prior: np.ndarray
    weight_lut: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.left.shape[:2]

    @classmethod
    def build(cls, left, right, prior: DisparityMap | np.ndarray | None = None, delta: float = 10.0):
        left = np.asarray(left)
        right = np.asarray(right)
        for name, img in (("left", left), ("right", right)):
            if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
                raise FormatError(f"{name} image must be (H, W, 3) uint8, got {img.dtype} {img.shape}")
        check_same_shape(("left image", left.shape), ("right image", right.shape))
        h, w = left.shape[:2]
        if prior is None:
            prior_arr = np.full((h, w), np.nan)
        else:
            prior_arr = prior.values if isinstance(prior, DisparityMap) else np.asarray(prior, dtype=np.float64)
            check_same_shape(("left image", left.shape), ("prior", prior_arr.shape))
        lut = np.exp(-np.arange(MAX_L1 + 1, dtype=np.float64) / delta)
        return cls(
            left=left.astype(np.float64),
            right=right.astype(np.float64),
            left_i=left.astype(np.int32),
            grad_left=gradient_x(left),
            grad_right=gradient_x(right),
            prior=np.ascontiguousarray(prior_arr, dtype=np.float64),
            weight_lut=lut,
        )

    def kernel_arrays(self) -> tuple:
        return (self.left, self.right, self.left_i, self.grad_left, self.grad_right, self.prior, self.weight_lut)


@njit(cache=True)
def window_cost(x, y, a, b, c, arrays, cp, bail):
    """Aggregated cost of plane ``(a, b, c)`` at pixel ``(x, y)``.

    Returns early, with a partial sum that is already ``>= bail``, once the
    plane can no longer beat ``bail``; every term is non-negative so the
    accept/reject decision is unaffected.
    """
    left, right, left_i, gl, gr, prior, lut = arrays
    radius, alpha, beta, gamma, lam_col, lam_grad, lam_disp, blank = cp
    h = left.shape[0]
    w = left.shape[1]
    y0 = max(y - radius, 0)
    y1 = min(y + radius, h - 1)
    x0 = max(x - radius, 0)
    x1 = min(x + radius, w - 1)
    r0 = left_i[y, x, 0]
    g0 = left_i[y, x, 1]
    b0 = left_i[y, x, 2]
    use_grad = beta > 0.0
    total = 0.0
    for yy in range(y0, y1 + 1):
        for xx in range(x0, x1 + 1):
            k = abs(left_i[yy, xx, 0] - r0) + abs(left_i[yy, xx, 1] - g0) + abs(left_i[yy, xx, 2] - b0)
            wt = lut[k]
            d = a * xx + b * yy + c
            xq = xx - d
            if xq < 0.0 or xq > w - 1:
                col = lam_col
                grd = lam_grad
            else:
                i0 = int(xq)
                t = xq - i0
                if t == 0.0:
                    col = (abs(left[yy, xx, 0] - right[yy, i0, 0]) + abs(left[yy, xx, 1] - right[yy, i0, 1])
                           + abs(left[yy, xx, 2] - right[yy, i0, 2]))
                    grd = abs(gl[yy, xx] - gr[yy, i0]) if use_grad else 0.0
                else:
                    s = 1.0 - t
                    col = (abs(left[yy, xx, 0] - (s * right[yy, i0, 0] + t * right[yy, i0 + 1, 0]))
                           + abs(left[yy, xx, 1] - (s * right[yy, i0, 1] + t * right[yy, i0 + 1, 1]))
                           + abs(left[yy, xx, 2] - (s * right[yy, i0, 2] + t * right[yy, i0 + 1, 2])))
                    grd = abs(gl[yy, xx] - (s * gr[yy, i0] + t * gr[yy, i0 + 1])) if use_grad else 0.0
                if col > lam_col:
                    col = lam_col
                if grd > lam_grad:
                    grd = lam_grad
            pv = prior[yy, xx]
            if np.isnan(pv):
                dis = blank
            else:
                dis = abs(pv - d)
                if dis > lam_disp:
                    dis = lam_disp
            total += wt * (alpha * col + beta * grd + gamma * dis)
        if total >= bail:
            return total
    return total


def aggregate_cost(x: int, y: int, plane: Plane, views: StereoViews, params: CostParams = CostParams()) -> float:
    """Window cost of ``plane`` at pixel ``(x, y)`` (left image is the reference)."""
    if params.front_parallel:
        a, b, c = 0.0, 0.0, float(plane_disparity(plane, x, y))
    else:
        a, b, c = float(plane.a), float(plane.b), float(plane.c)
    return float(window_cost(int(x), int(y), a, b, c, views.kernel_arrays(), params.kernel_args(), np.inf))
