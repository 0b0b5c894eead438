"""Image-sized containers for disparity and depth.

Invalid pixels are stored as NaN so that validity travels with the values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError


def _as_float_grid(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D grid, got shape {arr.shape}")
    return arr


@dataclass
class DisparityMap:
    """Per-pixel disparity in pixels; NaN marks an invalid pixel."""

    values: np.ndarray

    def __post_init__(self):
        self.values = _as_float_grid(self.values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.values)

    def valid_count(self) -> int:
        return int(self.valid.sum())

    def copy(self):
        return type(self)(self.values.copy())

    @classmethod
    def empty(cls, height: int, width: int):
        return cls(np.full((height, width), np.nan))


@dataclass
class DepthMap:
    """Per-pixel depth in meters; NaN marks an invalid pixel."""

    values: np.ndarray

    def __post_init__(self):
        self.values = _as_float_grid(self.values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.values)

    def copy(self) -> "DepthMap":
        return DepthMap(self.values.copy())


@dataclass
class SparseDisparityMap(DisparityMap):
    """Sparse LiDAR disparities with the scan line (ring) each cell came from.

    ``ring`` holds -1 wherever no ring is known.
    """

    ring: np.ndarray = None
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        super().__post_init__()
        if self.ring is None:
            self.ring = np.full(self.values.shape, -1, dtype=np.int32)
        else:
            self.ring = np.asarray(self.ring, dtype=np.int32)
        if self.ring.shape != self.values.shape:
            raise DimensionError(
                f"ring grid {self.ring.shape} does not match disparity grid {self.values.shape}"
            )

    def copy(self) -> "SparseDisparityMap":
        return SparseDisparityMap(self.values.copy(), self.ring.copy(), dict(self.stats))

    @classmethod
    def empty(cls, height: int, width: int) -> "SparseDisparityMap":
        return cls(np.full((height, width), np.nan))

    def to_dense(self) -> DisparityMap:
        return DisparityMap(self.values.copy())


def check_same_shape(*shapes_and_names) -> None:
    """Raise DimensionError unless every ``(name, shape)`` pair shares one 2-D shape."""
    ref_name, ref = shapes_and_names[0]
    for name, shape in shapes_and_names[1:]:
        if tuple(shape[:2]) != tuple(ref[:2]):
            raise DimensionError(f"{name} has size {tuple(shape[:2])}, {ref_name} has {tuple(ref[:2])}")
