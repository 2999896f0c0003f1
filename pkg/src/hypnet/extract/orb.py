"""Oriented BRIEF patch descriptors and a grid-cell keyed duplicate filter.

The descriptor follows the usual ORB recipe on a single square patch:
orientation from the intensity centroid of the inscribed disc, a fixed
seeded set of 256 point pairs rotated to that orientation, and one bit per
pair comparing Gaussian-smoothed intensities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

N_BITS = 256
HAMMING_THRESHOLD = 64
SMOOTH_SIGMA = 2.0
PATTERN_SEED = 20111106


def sampling_pattern(patch_size: int, n_bits: int = N_BITS, seed: int = PATTERN_SEED) -> np.ndarray:
    """``[n_bits, 2, 2]`` test-point offsets ``(dx, dy)`` from the patch center.

    Points are drawn isotropic Gaussian with sigma ``patch_size / 5`` and
    rejected outside a disc small enough that any rotation stays in the patch.
    """
    rng = np.random.default_rng(seed)
    radius = patch_size / 2.0 - 2.0
    pts = np.empty((0, 2))
    while len(pts) < 2 * n_bits:
        cand = rng.normal(0.0, patch_size / 5.0, size=(4 * n_bits, 2))
        pts = np.concatenate([pts, cand[np.hypot(cand[:, 0], cand[:, 1]) <= radius]])
    return pts[: 2 * n_bits].reshape(n_bits, 2, 2)


def orientation(patch: np.ndarray) -> float:
    """Angle of the intensity centroid of the inscribed disc, in radians."""
    p = np.asarray(patch, dtype=np.float64)
    size = p.shape[0]
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size] - c
    disc = xx * xx + yy * yy <= (size / 2.0) ** 2
    m10 = float(np.sum(xx * p * disc))
    m01 = float(np.sum(yy * p * disc))
    return float(np.arctan2(m01, m10))


def orb_descriptor(patch: np.ndarray, pattern: np.ndarray | None = None) -> np.ndarray:
    """256-bit descriptor of a square patch, packed into 32 bytes."""
    p = np.asarray(patch, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError(f"expected a square 2-D patch, got shape {p.shape}")
    size = p.shape[0]
    if pattern is None:
        pattern = sampling_pattern(size)
    smooth = ndimage.gaussian_filter(p, SMOOTH_SIGMA, mode="reflect")
    theta = orientation(p)
    cos, sin = np.cos(theta), np.sin(theta)
    dx, dy = pattern[..., 0], pattern[..., 1]
    c = (size - 1) / 2.0
    xs = np.clip(np.rint(c + cos * dx - sin * dy), 0, size - 1).astype(np.int64)
    ys = np.clip(np.rint(c + sin * dx + cos * dy), 0, size - 1).astype(np.int64)
    vals = smooth[ys, xs]
    bits = vals[:, 0] < vals[:, 1]
    return np.packbits(bits)


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    return int(np.unpackbits(np.bitwise_xor(a, b)).sum())


def min_hamming(desc: np.ndarray, bank: np.ndarray) -> int:
    """Smallest Hamming distance from ``desc`` to any row of ``bank``."""
    if len(bank) == 0:
        raise ValueError("empty descriptor bank")
    return int(np.unpackbits(np.bitwise_xor(bank, desc[None, :]), axis=1).sum(axis=1).min())


@dataclass
class OrbDeduplicator:
    """Cache of descriptors from earlier frames, keyed by ``(modality, cell)``.

    ``filter`` decides a whole frame against the cache as it stood before
    the frame, then adds the kept patches, so replaying the same frame
    sequence always keeps the same patches.
    """

    threshold: int = HAMMING_THRESHOLD
    cache: dict[tuple[int, tuple[int, int]], list[np.ndarray]] = field(default_factory=dict)

    def _neighbors(self, modality: int, cell: tuple[int, int]):
        r, c = cell
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                yield from self.cache.get((modality, (r + dr, c + dc)), ())

    def is_duplicate(self, desc: np.ndarray, modality: int, cell: tuple[int, int]) -> bool:
        bank = list(self._neighbors(modality, cell))
        return bool(bank) and min_hamming(desc, np.stack(bank)) <= self.threshold

    def filter(self, items: list[tuple[np.ndarray, int, tuple[int, int]]]) -> list[bool]:
        """Keep flags for ``(patch, modality, cell)`` items of one frame."""
        descs = [orb_descriptor(p) for p, _, _ in items]
        keep = [not self.is_duplicate(d, m, cell) for d, (_, m, cell) in zip(descs, items)]
        for d, k, (_, m, cell) in zip(descs, keep, items):
            if k:
                self.cache.setdefault((m, cell), []).append(d)
        return keep
