"""Procedural stereo + LiDAR frames with exact ground truth.

Two generators:

* ``shifted_pair`` - a random-texture pair related by a constant integer
  disparity, for oracle tests of the matcher.
* ``render_street_scene`` - a ray-cast road scene (ground, facades, cars,
  poles, far wall) seen by a KITTI-like rectified stereo rig and a 64-beam
  spinning LiDAR mounted above and behind the left camera.  Surfaces carry
  world-anchored textures, so both views and the LiDAR see one consistent
  scene; the offset LiDAR viewpoint produces real overlap outliers.

Camera frame: x right, y down, z forward.  LiDAR frame: x forward, y left, z up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .calib_io import Calibration, PointCloud
from .maps import DepthMap, SparseDisparityMap

# KITTI raw 2011_09_26 colour rig, camera 2.
KITTI_SIZE = (1242, 375)
KITTI_FX = 721.5377
KITTI_CX = 609.5593
KITTI_CY = 172.854
KITTI_BASELINE = 0.5327

CAMERA_HEIGHT = 1.65
LIDAR_OFFSET = np.array([0.0, -0.08, -0.27])
VELO_TO_CAM = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
GT_MAX_DEPTH = 80.0
BACKDROP_RADIUS = 85.0

HDL64_ELEVATIONS = np.concatenate([np.linspace(2.0, -8.33, 32), np.linspace(-8.83, -24.33, 32)])

_GROUND = -1
_BACKDROP = -2
_MISS = -3


@dataclass
class SyntheticFrame:
    left: np.ndarray
    right: np.ndarray
    cloud: PointCloud
    calib: Calibration
    gt_depth: DepthMap
    rings: np.ndarray


def shifted_pair(height: int, width: int, d0: int, seed: int = 0, blur: int = 1):
    """Textured ``(left, right)`` pair with ``right[y, x - d0] == left[y, x]``.

    Every left pixel ``x`` is seen at ``x - d0`` in the right image, i.e. the
    true disparity is ``d0`` everywhere.
    """
    rng = np.random.default_rng(seed)
    tex = rng.integers(0, 256, size=(height, width + d0, 3)).astype(np.float64)
    if blur > 0:
        k = 2 * blur + 1
        pad = np.pad(tex, ((0, 0), (blur, blur), (0, 0)), mode="edge")
        tex = sum(pad[:, i:i + tex.shape[1]] for i in range(k)) / k
    tex = np.clip(np.rint(tex), 0, 255).astype(np.uint8)
    left = np.ascontiguousarray(tex[:, 0:width])
    right = np.ascontiguousarray(tex[:, d0:d0 + width])
    return left, right


def scan_rows(height: int, width: int, d0: float, spacing: int, first: int = 0) -> SparseDisparityMap:
    """Exact constant-disparity LiDAR rows every ``spacing`` rows, one ring per row."""
    sparse = SparseDisparityMap.empty(height, width)
    for ring, y in enumerate(range(first, height, spacing)):
        sparse.values[y, :] = d0
        sparse.ring[y, :] = ring
    return sparse


# ---------------------------------------------------------------------------
# Ray casting
# ---------------------------------------------------------------------------


@njit(cache=True)
def _cast(origin, dirs, boxes, ground_y, backdrop_r, backdrop_top):
    n = dirs.shape[0]
    t_out = np.full(n, np.inf)
    prim = np.full(n, _MISS, dtype=np.int64)
    axis = np.zeros(n, dtype=np.int64)
    for i in range(n):
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        best = np.inf
        best_p = _MISS
        best_a = 1
        if dy > 1e-12:
            t = (ground_y - origin[1]) / dy
            hx = origin[0] + t * dx
            hz = origin[2] + t * dz
            if t > 0 and hx * hx + hz * hz < backdrop_r * backdrop_r:
                best = t
                best_p = _GROUND
                best_a = 1
        # cylinder x^2 + z^2 = r^2 about the camera's vertical axis
        qa = dx * dx + dz * dz
        if qa > 1e-12:
            qb = 2.0 * (origin[0] * dx + origin[2] * dz)
            qc = origin[0] * origin[0] + origin[2] * origin[2] - backdrop_r * backdrop_r
            disc = qb * qb - 4 * qa * qc
            if disc >= 0:
                t = (-qb + np.sqrt(disc)) / (2 * qa)
                hy = origin[1] + t * dy
                if 0 < t < best and backdrop_top <= hy <= ground_y:
                    best = t
                    best_p = _BACKDROP
                    best_a = 0
        for k in range(boxes.shape[0]):
            tmin = -np.inf
            tmax = np.inf
            amin = 0
            ok = True
            for a in range(3):
                o = origin[a]
                d = dirs[i, a]
                lo = boxes[k, a]
                hi = boxes[k, a + 3]
                if abs(d) < 1e-12:
                    if o < lo or o > hi:
                        ok = False
                        break
                    continue
                t1 = (lo - o) / d
                t2 = (hi - o) / d
                if t1 > t2:
                    t1, t2 = t2, t1
                if t1 > tmin:
                    tmin = t1
                    amin = a
                if t2 < tmax:
                    tmax = t2
            if not ok or tmax < tmin or tmin <= 1e-6:
                continue
            if tmin < best:
                best = tmin
                best_p = k
                best_a = amin
        t_out[i] = best
        prim[i] = best_p
        axis[i] = best_a
    return t_out, prim, axis


class _Texture:
    """Fractal value noise on a wrapped random lattice."""

    def __init__(self, rng, size=256):
        self.lattice = rng.uniform(-1.0, 1.0, size=(size, size))
        self.size = size

    def _sample(self, u, v):
        n = self.size
        u0 = np.floor(u)
        v0 = np.floor(v)
        fu = u - u0
        fv = v - v0
        i0 = u0.astype(np.int64) % n
        j0 = v0.astype(np.int64) % n
        i1 = (i0 + 1) % n
        j1 = (j0 + 1) % n
        lat = self.lattice
        top = lat[j0, i0] * (1 - fu) + lat[j0, i1] * fu
        bot = lat[j1, i0] * (1 - fu) + lat[j1, i1] * fu
        return top * (1 - fv) + bot * fv

    def __call__(self, u, v, cell, octaves=3):
        out = np.zeros_like(u)
        amp, norm = 1.0, 0.0
        for o in range(octaves):
            f = (2.0 ** o) / cell
            out += amp * self._sample(u * f + 17.0 * o, v * f + 31.0 * o)
            norm += amp
            amp *= 0.5
        return out / norm


@dataclass
class _Material:
    color: tuple
    amplitude: float
    cell: float
    texture: _Texture


@dataclass
class StreetScene:
    boxes: np.ndarray
    materials: list
    ground_road: _Material
    ground_side: _Material
    backdrop: _Material
    road_half_width: float


def random_street_scene(seed: int) -> StreetScene:
    rng = np.random.default_rng(seed)
    boxes, mats = [], []

    def mat(color, amplitude, cell):
        return _Material(tuple(color), amplitude, cell, _Texture(rng))

    def add(bounds, material):
        boxes.append(bounds)
        mats.append(material)

    gy = CAMERA_HEIGHT
    # facades: long boxes on both sides, split into buildings of varying set-back
    for side in (-1, 1):
        z = 4.0
        while z < 75.0:
            length = rng.uniform(8.0, 20.0)
            setback = rng.uniform(7.5, 11.0)
            height = rng.uniform(6.0, 14.0)
            x_in = side * setback
            x_out = side * (setback + 6.0)
            color = rng.uniform(60, 200, size=3)
            flat = rng.random() < 0.35
            add((min(x_in, x_out), gy - height, z, max(x_in, x_out), gy, z + length),
                mat(color, 4.0 if flat else rng.uniform(25, 50), rng.uniform(0.3, 1.2)))
            z += length + rng.uniform(0.0, 4.0)
    # far wall closing the street
    add((-40.0, gy - 12.0, 76.0, 40.0, gy, 78.0), mat(rng.uniform(80, 160, 3), 30.0, 1.5))
    # cars
    lanes = [-5.5, -2.3, 2.3, 5.5]
    for _ in range(rng.integers(5, 9)):
        cx = rng.choice(lanes) + rng.uniform(-0.4, 0.4)
        cz = rng.uniform(6.0, 45.0)
        width, length, height = rng.uniform(1.6, 1.9), rng.uniform(3.8, 4.8), rng.uniform(1.3, 1.7)
        color = rng.uniform(20, 230, size=3)
        add((cx - width / 2, gy - height - 0.15, cz, cx + width / 2, gy - 0.15, cz + length),
            mat(color, rng.uniform(6, 20), rng.uniform(0.2, 0.6)))
    # poles and trunks on the sidewalks
    for _ in range(rng.integers(4, 9)):
        px = rng.choice([-1, 1]) * rng.uniform(6.5, 7.3)
        pz = rng.uniform(5.0, 60.0)
        r = rng.uniform(0.12, 0.3)
        add((px - r, gy - rng.uniform(3.0, 6.0), pz - r, px + r, gy, pz + r),
            mat(rng.uniform(40, 120, 3), 30.0, 0.15))

    return StreetScene(
        boxes=np.array(boxes, dtype=np.float64),
        materials=mats,
        ground_road=mat((105, 105, 110), 10.0, 0.25),
        ground_side=mat((150, 140, 120), 35.0, 0.3),
        backdrop=mat((120, 130, 120), 25.0, 3.0),
        road_half_width=6.5,
    )


_SKY = np.array([175.0, 195.0, 220.0])


def _shade(scene: StreetScene, origin, dirs, t, prim, axis):
    """Colour of every ray hit (sky colour for misses)."""
    n = dirs.shape[0]
    colors = np.tile(_SKY, (n, 1))
    hit = prim != _MISS
    pts = origin[None, :] + dirs * np.where(hit, t, 0.0)[:, None]
    for pid in [_GROUND, _BACKDROP] + list(range(len(scene.materials))):
        sel = np.nonzero(prim == pid)[0]
        if sel.size == 0:
            continue
        p = pts[sel]
        if pid == _GROUND:
            u, v = p[:, 0], p[:, 2]
            road = np.abs(p[:, 0]) < scene.road_half_width
            col = np.empty((sel.size, 3))
            for m, mask in ((scene.ground_road, road), (scene.ground_side, ~road)):
                if mask.any():
                    tex = m.texture(u[mask], v[mask], m.cell)
                    col[mask] = np.asarray(m.color)[None, :] + m.amplitude * tex[:, None]
            shade = np.full(sel.size, 0.95)
        elif pid == _BACKDROP:
            m = scene.backdrop
            u = np.arctan2(p[:, 0], p[:, 2]) * BACKDROP_RADIUS
            tex = m.texture(u, p[:, 1], m.cell)
            col = np.asarray(m.color)[None, :] + m.amplitude * tex[:, None]
            shade = np.full(sel.size, 0.8)
        else:
            m = scene.materials[pid]
            ax = axis[sel]
            u = np.where(ax == 0, p[:, 2], p[:, 0])
            v = np.where(ax == 1, p[:, 2], p[:, 1])
            tex = m.texture(u, v, m.cell)
            col = np.asarray(m.color)[None, :] + m.amplitude * tex[:, None]
            # constant per face orientation
            face_light = np.array([0.75, 1.0, 0.9])
            shade = face_light[ax]
        colors[sel] = col * shade[:, None]
    return colors


def _pixel_rays(calib: Calibration, supersample: int):
    s = supersample
    offs = (np.arange(s) + 0.5) / s - 0.5
    ys, xs = np.mgrid[0:calib.height, 0:calib.width]
    us = (xs[:, :, None, None] + offs[None, None, None, :])
    vs = (ys[:, :, None, None] + offs[None, None, :, None])
    us, vs = np.broadcast_arrays(us, vs)
    dirs = np.stack([(us - calib.cx) / calib.fx, (vs - calib.cy) / calib.fy, np.ones_like(us)], axis=-1)
    return dirs.reshape(-1, 3)


def _render_view(scene, calib, origin, supersample):
    dirs = _pixel_rays(calib, supersample)
    t, prim, axis = _cast(origin, dirs, scene.boxes, CAMERA_HEIGHT, BACKDROP_RADIUS, CAMERA_HEIGHT - 15.0)
    colors = _shade(scene, origin, dirs, t, prim, axis)
    img = colors.reshape(calib.height, calib.width, supersample * supersample, 3).mean(axis=2)
    return img


def _depth_view(scene, calib, origin):
    dirs = _pixel_rays(calib, 1)
    t, prim, _ = _cast(origin, dirs, scene.boxes, CAMERA_HEIGHT, BACKDROP_RADIUS, CAMERA_HEIGHT - 15.0)
    z = np.where(prim != _MISS, t * dirs[:, 2], np.nan)
    z[z > GT_MAX_DEPTH] = np.nan
    return z.reshape(calib.height, calib.width)


def simulate_lidar(
    scene: StreetScene,
    rng: np.random.Generator,
    azimuth_steps: int = 2083,
    elevations_deg: np.ndarray | None = None,
    range_noise: float = 0.01,
    dropout: float = 0.02,
    max_range: float = 120.0,
    origin_cam: np.ndarray = LIDAR_OFFSET,
):
    """Spinning-LiDAR scan in firing order: one full clockwise sweep per beam.

    Returns the cloud in the sensor frame and the true ring of every point.
    The default beam layout is the two-block pattern of a 64-beam head.
    """
    if elevations_deg is None:
        elevations_deg = HDL64_ELEVATIONS
    elevations = np.deg2rad(np.asarray(elevations_deg, dtype=np.float64))
    beams = elevations.shape[0]
    # per-beam azimuth offsets, as on real multi-laser heads
    start = np.pi - np.deg2rad(rng.uniform(-3.0, 3.0, size=beams))
    step = 2 * np.pi / azimuth_steps
    az = start[:, None] - step * np.arange(azimuth_steps)[None, :]
    el = np.broadcast_to(elevations[:, None], az.shape)
    ring = np.broadcast_to(np.arange(beams)[:, None], az.shape).ravel()
    dir_velo = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1).reshape(-1, 3)
    dir_cam = dir_velo @ VELO_TO_CAM.T
    t, prim, _ = _cast(origin_cam.astype(np.float64), dir_cam, scene.boxes, CAMERA_HEIGHT,
                       BACKDROP_RADIUS, CAMERA_HEIGHT - 15.0)
    keep = (prim != _MISS) & (t < max_range) & (rng.random(t.shape) >= dropout)
    rng_m = t[keep] + rng.normal(0.0, range_noise, size=int(keep.sum()))
    xyz = dir_velo[keep] * rng_m[:, None]
    intensity = rng.uniform(0.0, 1.0, size=xyz.shape[0])
    pts = np.column_stack([xyz, intensity]).astype(np.float32)
    return PointCloud(pts), ring[keep].astype(np.int32)


def kitti_like_calibration(scale: float = 1.0) -> Calibration:
    w = int(round(KITTI_SIZE[0] * scale))
    h = int(round(KITTI_SIZE[1] * scale))
    return Calibration(
        fx=KITTI_FX * scale, fy=KITTI_FX * scale, cx=KITTI_CX * scale, cy=KITTI_CY * scale,
        baseline=KITTI_BASELINE, focal=KITTI_FX * scale,
        rotation=VELO_TO_CAM, translation=LIDAR_OFFSET, width=w, height=h,
    )


def render_street_scene(
    seed: int = 0,
    scale: float = 1.0,
    supersample: int = 2,
    noise_sigma: float = 2.0,
    right_gain: float = 0.96,
    right_offset: float = 3.0,
) -> SyntheticFrame:
    """Render a left/right/LiDAR/ground-truth frame of a random street.

    The right camera gets a small gain/offset change and both views get
    independent Gaussian sensor noise.
    """
    rng = np.random.default_rng(seed)
    scene = random_street_scene(int(rng.integers(0, 2**31)))
    calib = kitti_like_calibration(scale)
    left = _render_view(scene, calib, np.zeros(3), supersample)
    right = _render_view(scene, calib, np.array([calib.baseline, 0.0, 0.0]), supersample)
    right = right * right_gain + right_offset
    left = left + rng.normal(0.0, noise_sigma, left.shape)
    right = right + rng.normal(0.0, noise_sigma, right.shape)
    gt = _depth_view(scene, calib, np.zeros(3))
    cloud, rings = simulate_lidar(scene, rng)
    return SyntheticFrame(
        left=np.clip(np.rint(left), 0, 255).astype(np.uint8),
        right=np.clip(np.rint(right), 0, 255).astype(np.uint8),
        cloud=cloud,
        calib=calib,
        gt_depth=DepthMap(gt),
        rings=rings,
    )
