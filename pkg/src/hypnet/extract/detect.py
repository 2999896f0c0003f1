"""Harris corner response and the FAST-9 segment-test detector."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

HARRIS_K = 0.04
HARRIS_SIGMA = 1.5
FAST_THRESHOLD = 20
FAST_ARC = 9

# Bresenham circle of radius 3, clockwise from 12 o'clock, as (dy, dx)
CIRCLE = (
    (-3, 0), (-3, 1), (-2, 2), (-1, 3), (0, 3), (1, 3), (2, 2), (3, 1),
    (3, 0), (3, -1), (2, -2), (1, -3), (0, -3), (-1, -3), (-2, -2), (-3, -1),
)
RADIUS = 3


def _check_image(img: np.ndarray, min_size: int) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {img.shape}")
    if min(img.shape) < min_size:
        raise ValueError(f"image {img.shape} is smaller than {min_size}x{min_size}")
    return img


def harris_response(img: np.ndarray, k: float = HARRIS_K, sigma: float = HARRIS_SIGMA) -> np.ndarray:
    """``det(M) - k trace(M)^2`` of the Gaussian-windowed Sobel structure tensor.

    Intensities are scaled to [0, 1] first, so the response of an 8-bit
    image does not depend on its storage type.
    """
    img = _check_image(img, 7).astype(np.float64) / 255.0
    ix = ndimage.sobel(img, axis=1, mode="reflect")
    iy = ndimage.sobel(img, axis=0, mode="reflect")
    sxx = ndimage.gaussian_filter(ix * ix, sigma, mode="reflect")
    syy = ndimage.gaussian_filter(iy * iy, sigma, mode="reflect")
    sxy = ndimage.gaussian_filter(ix * iy, sigma, mode="reflect")
    trace = sxx + syy
    return sxx * syy - sxy * sxy - k * trace * trace


def _arc_mask(flags: np.ndarray, arc: int) -> np.ndarray:
    """True where ``flags[16, ...]`` has ``arc`` circularly contiguous True entries."""
    n = flags.shape[0]
    wrapped = np.concatenate([flags, flags[: arc - 1]], axis=0)
    # running count of consecutive True values along the circle
    run = np.zeros(flags.shape[1:], dtype=np.int16)
    hit = np.zeros(flags.shape[1:], dtype=bool)
    for i in range(n + arc - 1):
        run = np.where(wrapped[i], run + 1, 0)
        hit |= run >= arc
    return hit


def fast_detect(img: np.ndarray, threshold: int = FAST_THRESHOLD, arc: int = FAST_ARC) -> np.ndarray:
    """FAST segment-test corners as an ``[n, 2]`` array of ``(x, y)`` in raster order.

    A pixel is a corner when at least ``arc`` contiguous pixels of its
    16-pixel circle are all brighter than ``center + threshold`` or all
    darker than ``center - threshold``.  Pixels closer than 3 to the border
    have no full circle and are never reported.  No non-maximum suppression
    is applied.
    """
    img = _check_image(img, 1).astype(np.int16)
    h, w = img.shape
    if h <= 2 * RADIUS or w <= 2 * RADIUS:
        return np.zeros((0, 2), dtype=np.int64)
    center = img[RADIUS : h - RADIUS, RADIUS : w - RADIUS]
    ring = np.stack([img[RADIUS + dy : h - RADIUS + dy, RADIUS + dx : w - RADIUS + dx] for dy, dx in CIRCLE])
    corner = _arc_mask(ring > center + threshold, arc) | _arc_mask(ring < center - threshold, arc)
    ys, xs = np.nonzero(corner)
    return np.stack([xs + RADIUS, ys + RADIUS], axis=1).astype(np.int64)
