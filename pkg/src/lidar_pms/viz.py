"""Colour-mapped previews of disparity maps."""

from __future__ import annotations

import cv2
import numpy as np

from .maps import DisparityMap


def colorize(disparity: DisparityMap | np.ndarray, d_max: float = 128.0) -> np.ndarray:
    """Viridis rendering on a fixed ``[0, d_max]`` scale; invalid pixels are black.

    Returns an ``(H, W, 3)`` uint8 RGB image.
    """
    values = disparity.values if isinstance(disparity, DisparityMap) else np.asarray(disparity, dtype=np.float64)
    valid = np.isfinite(values)
    scaled = np.zeros(values.shape, dtype=np.uint8)
    scaled[valid] = np.clip(np.rint(values[valid] / d_max * 255.0), 0, 255).astype(np.uint8)
    bgr = cv2.applyColorMap(scaled, cv2.COLORMAP_VIRIDIS)
    bgr[~valid] = 0
    return np.ascontiguousarray(bgr[:, :, ::-1])
