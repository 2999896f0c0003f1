"""Synthetic visible/IR-like data for probes and pipeline audits.

The second modality is a fixed photometric distortion of the first:
intensities are inverted, gamma-warped and corrupted with Gaussian noise, so
geometry is shared while appearance differs.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .corpus import PatchCorpus, from_pairs


def textured_patch(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Smoothed noise plus a few random rectangles and discs, scaled to [0, 1]."""
    base = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=rng.uniform(1.5, 4.0), mode="wrap")
    base = (base - base.mean()) / (base.std() + 1e-12)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(rng.integers(2, 6)):
        amp = rng.uniform(-1.5, 1.5)
        if rng.random() < 0.5:
            y0, x0 = rng.integers(0, size - 8, size=2)
            h, w = rng.integers(6, size // 2, size=2)
            base[y0 : y0 + h, x0 : x0 + w] += amp
        else:
            cy, cx = rng.uniform(0, size, size=2)
            r = rng.uniform(4, size / 4)
            base[(yy - cy) ** 2 + (xx - cx) ** 2 < r * r] += amp
    lo, hi = base.min(), base.max()
    return (base - lo) / (hi - lo + 1e-12)


def infrared_like(visible: np.ndarray, rng: np.random.Generator, gamma: float = 1.8, noise: float = 0.03) -> np.ndarray:
    """Inverted, gamma-warped, noisy copy of a [0, 1] image."""
    out = (1.0 - np.clip(visible, 0.0, 1.0)) ** gamma + rng.normal(0.0, noise, size=visible.shape)
    return np.clip(out, 0.0, 1.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def patch_pairs(n: int, seed: int, size: int = 64, gamma: float = 1.8, noise: float = 0.03) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    vis = [textured_patch(rng, size) for _ in range(n)]
    ir = [infrared_like(v, rng, gamma, noise) for v in vis]
    return to_uint8(np.stack(vis)), to_uint8(np.stack(ir))


def sequential_split(n: int, ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)) -> np.ndarray:
    n_train = int(np.floor(ratios[0] * n + 0.5))
    n_val = int(np.floor(ratios[1] * n + 0.5))
    return np.array(["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val))


def overfit_corpus(n_pairs: int = 256, seed: int = 0, ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)) -> PatchCorpus:
    """Matched synthetic pairs split sequentially, with one non-match row per match."""
    mod0, mod1 = patch_pairs(n_pairs, seed)
    return from_pairs(mod0, mod1, sequential_split(n_pairs, ratios), seed=seed)


def random_corpus(n_pairs: int, seed: int, categories: int = 2) -> PatchCorpus:
    """Unrelated patches in both modalities: labels carry no signal."""
    rng = np.random.default_rng(seed)
    mod0 = rng.integers(0, 256, size=(n_pairs, 64, 64), dtype=np.uint8)
    mod1 = rng.integers(0, 256, size=(n_pairs, 64, 64), dtype=np.uint8)
    category = np.array([f"cat{k % categories}" for k in range(n_pairs)])
    return from_pairs(mod0, mod1, np.full(n_pairs, "test"), category, seed=seed)


def scene_image(rng: np.random.Generator, height: int = 192, width: int = 256) -> np.ndarray:
    """Piecewise-constant scene of overlapping rectangles, rich in corners, in [0, 1]."""
    img = np.full((height, width), rng.uniform(0.2, 0.8))
    for _ in range(rng.integers(12, 30)):
        y0, x0 = rng.integers(0, height - 8), rng.integers(0, width - 8)
        h, w = rng.integers(8, height // 3), rng.integers(8, width // 3)
        img[y0 : y0 + h, x0 : x0 + w] = rng.uniform(0.0, 1.0)
    img += rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def scene_pair(seed: int, height: int = 192, width: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Aligned 8-bit (visible, IR-like) scene images."""
    rng = np.random.default_rng(seed)
    vis = scene_image(rng, height, width)
    return to_uint8(vis), to_uint8(infrared_like(vis, rng))


def checkerboard(height: int, width: int, square: int, frame: int = 40, low: int = 40, high: int = 215, background: int = 128) -> np.ndarray:
    """Checkerboard inside a uniform frame of width ``frame``.

    Interior X-junctions defeat segment-test detectors; the board's outer
    corners and its T-junctions against the frame are the detectable corners.
    """
    yy, xx = np.mgrid[0:height, 0:width]
    board = ((yy // square) + (xx // square)) % 2
    img = np.where(board == 1, high, low)
    inside = (yy >= frame) & (yy < height - frame) & (xx >= frame) & (xx < width - frame)
    return np.where(inside, img, background).astype(np.uint8)
