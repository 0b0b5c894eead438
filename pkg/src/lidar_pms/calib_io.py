"""Readers and writers for LiDAR scans, calibration, RGB images and 16-bit rasters.

File conventions follow the KITTI raw / depth-completion releases:

* LiDAR scans are little-endian float32 quadruplets ``(x, y, z, reflectance)``.
* Calibration is line-oriented text, ``KEY: v1 v2 ...``.  Both the raw-data
  layout (``P_rect_02``, ``R_rect_00``, ``R``/``T``) and the object/odometry
  layout (``P2``, ``R0_rect``, ``Tr_velo_to_cam``) are understood.
* Depth and disparity rasters are 16-bit grayscale PNGs holding ``value * 256``
  with 0 meaning "no measurement".
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import cv2
import numpy as np

from .errors import CalibrationError, FormatError, MissingKeyError
from .maps import DepthMap, DisparityMap

log = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

RASTER_SCALE = 256.0
ORTHONORMAL_TOL = 1e-6
ORTHONORMAL_READ_TOL = 1e-3

_LEFT_P_KEYS = ("P_rect_02", "P2")
_RIGHT_P_KEYS = ("P_rect_03", "P3")
_RECT_KEYS = ("R_rect_00", "R0_rect")
_SIZE_KEYS = ("S_rect_02", "S_02")


@dataclass(frozen=True)
class Calibration:
    """Rectified stereo intrinsics plus the LiDAR-to-left-camera transform.

    ``focal`` is the F of ``d = B * F / z``; for a rectified pair it equals ``fx``.
    ``rotation``/``translation`` map LiDAR coordinates into the left
    rectified camera frame.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float
    focal: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        if not (self.fx > 0 and self.fy > 0):
            raise CalibrationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not self.focal > 0:
            raise CalibrationError(f"stereo focal length must be positive, got {self.focal}")
        if not self.baseline > 0:
            raise CalibrationError(f"baseline must be positive, got {self.baseline}")
        if self.width <= 0 or self.height <= 0:
            raise CalibrationError(f"image size must be positive, got {self.width}x{self.height}")
        dev = orthonormality_error(rot)
        if dev > ORTHONORMAL_TOL:
            raise CalibrationError(f"rotation is not orthonormal (max |R^T R - I| = {dev:.3g})")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def bf(self) -> float:
        """Baseline times focal length: converts depth (m) to disparity (px)."""
        return self.baseline * self.focal

    @property
    def image_size(self) -> tuple[int, int]:
        return self.width, self.height

    @classmethod
    def from_intrinsics(cls, fx, fy, cx, cy, baseline, width, height, rotation=None, translation=None):
        return cls(
            fx=float(fx), fy=float(fy), cx=float(cx), cy=float(cy),
            baseline=float(baseline), focal=float(fx),
            rotation=np.eye(3) if rotation is None else rotation,
            translation=np.zeros(3) if translation is None else translation,
            width=int(width), height=int(height),
        )


def orthonormality_error(rot: np.ndarray) -> float:
    rot = np.asarray(rot, dtype=np.float64)
    return float(np.abs(rot.T @ rot - np.eye(3)).max())


def _nearest_rotation(rot: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(rot)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


# ---------------------------------------------------------------------------
# LiDAR scans
# ---------------------------------------------------------------------------


@dataclass
class PointCloud:
    """LiDAR returns in sensor firing order, shape ``(N, 4)``: x, y, z, intensity."""

    points: np.ndarray
    rejected: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise FormatError(f"point array must have shape (N, 4), got {pts.shape}")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]


def read_point_cloud(path: PathLike) -> PointCloud:
    """Parse a KITTI ``.bin`` scan.

    Records containing NaN or infinite values are dropped; the number dropped
    is kept in ``PointCloud.rejected``.
    """
    raw = Path(path).read_bytes()
    if len(raw) % 16 != 0:
        raise FormatError(f"{path}: {len(raw)} bytes is not a whole number of 16-byte points")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float32)
    finite = np.isfinite(pts).all(axis=1)
    rejected = int((~finite).sum())
    if rejected:
        log.warning("%s: rejected %d non-finite LiDAR records", path, rejected)
        pts = pts[finite]
    return PointCloud(pts, rejected=rejected)


def write_point_cloud(cloud: PointCloud, path: PathLike) -> None:
    Path(path).write_bytes(np.ascontiguousarray(cloud.points, dtype="<f4").tobytes())


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


def parse_calibration_text(text: str) -> dict[str, np.ndarray]:
    """Collect ``KEY: numbers`` lines; lines whose values are not numeric are skipped."""
    entries: dict[str, np.ndarray] = {}
    for line in text.splitlines():
        if ":" not in line:
            continue
        key, _, rest = line.partition(":")
        try:
            values = np.array([float(v) for v in rest.split()], dtype=np.float64)
        except ValueError:
            continue
        entries[key.strip()] = values
    return entries


def _lookup(entries: Mapping[str, np.ndarray], keys: Sequence[str], size: int, source) -> np.ndarray:
    for key in keys:
        if key in entries:
            vals = entries[key]
            if vals.size != size:
                raise CalibrationError(f"{key} has {vals.size} values, expected {size}")
            return vals
    raise MissingKeyError(keys[0], source)


def calibration_from_entries(
    entries: Mapping[str, np.ndarray],
    image_size: tuple[int, int] | None = None,
    source=None,
) -> Calibration:
    p_left = _lookup(entries, _LEFT_P_KEYS, 12, source).reshape(3, 4)
    p_right = _lookup(entries, _RIGHT_P_KEYS, 12, source).reshape(3, 4)
    r_rect = _lookup(entries, _RECT_KEYS, 9, source).reshape(3, 3)

    if "Tr_velo_to_cam" in entries:
        tr = _lookup(entries, ("Tr_velo_to_cam",), 12, source).reshape(3, 4)
        r_velo, t_velo = tr[:, :3], tr[:, 3]
    elif "R" in entries and "T" in entries:
        r_velo = _lookup(entries, ("R",), 9, source).reshape(3, 3)
        t_velo = _lookup(entries, ("T",), 3, source)
    else:
        raise MissingKeyError("Tr_velo_to_cam", source)

    if image_size is None:
        size = _lookup(entries, _SIZE_KEYS, 2, source)
        image_size = (int(round(size[0])), int(round(size[1])))

    k = p_left[:, :3]
    fx, fy, cx, cy = k[0, 0], k[1, 1], k[0, 2], k[1, 2]
    # Offset of the left rectified camera from the reference camera.
    t_cam = np.linalg.solve(k, p_left[:, 3])

    rot = r_rect @ r_velo
    trans = r_rect @ t_velo + t_cam
    dev = orthonormality_error(rot)
    if dev > ORTHONORMAL_READ_TOL:
        raise CalibrationError(f"LiDAR-to-camera rotation is not orthonormal (deviation {dev:.3g})")
    rot = _nearest_rotation(rot)

    baseline = (p_left[0, 3] - p_right[0, 3]) / p_right[0, 0]
    return Calibration(
        fx=float(fx), fy=float(fy), cx=float(cx), cy=float(cy),
        baseline=float(baseline), focal=float(fx),
        rotation=rot, translation=trans,
        width=image_size[0], height=image_size[1],
    )


def read_calibration(paths: PathLike | Iterable[PathLike], image_size=None) -> Calibration:
    """Read one calibration file, or several whose entries are merged in order.

    KITTI raw drives split calibration over ``calib_cam_to_cam.txt`` and
    ``calib_velo_to_cam.txt``; pass both.
    """
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    paths = [Path(p) for p in paths]
    entries: dict[str, np.ndarray] = {}
    for p in paths:
        entries.update(parse_calibration_text(p.read_text()))
    source = paths[0] if len(paths) == 1 else ", ".join(map(str, paths))
    return calibration_from_entries(entries, image_size=image_size, source=source)


def write_calibration(calib: Calibration, path: PathLike) -> None:
    """Write ``calib`` in the single-file layout ``read_calibration`` accepts."""
    k = calib.K
    p_left = np.hstack([k, np.zeros((3, 1))])
    p_right = np.hstack([k, np.array([[-calib.fx * calib.baseline], [0.0], [0.0]])])
    tr = np.hstack([calib.rotation, calib.translation.reshape(3, 1)])

    def fmt(a):
        return " ".join(f"{v:.12e}" for v in np.ravel(a))

    lines = [
        f"P2: {fmt(p_left)}",
        f"P3: {fmt(p_right)}",
        f"R0_rect: {fmt(np.eye(3))}",
        f"Tr_velo_to_cam: {fmt(tr)}",
        f"S_rect_02: {calib.width} {calib.height}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Images and 16-bit rasters
# ---------------------------------------------------------------------------


def read_rgb(path: PathLike) -> np.ndarray:
    """Load an 8-bit image as an ``(H, W, 3)`` uint8 RGB array."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FileNotFoundError(f"cannot read image {path}")
    if img.dtype != np.uint8:
        raise FormatError(f"{path}: expected an 8-bit image, got {img.dtype}")
    if img.ndim == 2:
        return np.repeat(img[:, :, None], 3, axis=2)
    if img.shape[2] == 4:
        img = img[:, :, :3]
    return np.ascontiguousarray(img[:, :, ::-1])


def write_rgb(image: np.ndarray, path: PathLike) -> None:
    img = np.asarray(image, dtype=np.uint8)
    if not cv2.imwrite(str(path), np.ascontiguousarray(img[:, :, ::-1])):
        raise OSError(f"cannot write image {path}")


def _read_raster16(path: PathLike) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FileNotFoundError(f"cannot read raster {path}")
    if raw.dtype != np.uint16 or raw.ndim != 2:
        raise FormatError(f"{path}: expected a 16-bit single-channel raster, got {raw.dtype} {raw.shape}")
    values = raw.astype(np.float64) / RASTER_SCALE
    values[raw == 0] = np.nan
    return values


def encode_raster16(values: np.ndarray) -> np.ndarray:
    """Quantize to ``round_half_up(v * 256)`` clamped to uint16; NaN becomes 0."""
    vals = np.asarray(values, dtype=np.float64)
    out = np.zeros(vals.shape, dtype=np.uint16)
    ok = np.isfinite(vals)
    out[ok] = np.clip(np.floor(vals[ok] * RASTER_SCALE + 0.5), 0, 65535).astype(np.uint16)
    return out


def _write_raster16(values: np.ndarray, path: PathLike) -> None:
    if not cv2.imwrite(str(path), encode_raster16(values)):
        raise OSError(f"cannot write raster {path}")


def read_depth_png(path: PathLike) -> DepthMap:
    return DepthMap(_read_raster16(path))


def write_depth_png(depth: DepthMap, path: PathLike) -> None:
    _write_raster16(depth.values, path)


def read_disparity_png(path: PathLike) -> DisparityMap:
    return DisparityMap(_read_raster16(path))


def write_disparity_png(disparity: DisparityMap, path: PathLike) -> None:
    _write_raster16(disparity.values, path)
