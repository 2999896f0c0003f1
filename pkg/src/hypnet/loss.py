"""Descriptor distance, symmetric triplet margin loss and negative selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .tensor import Tensor, concat

DEFAULT_MARGIN = 1.0


def _unit(d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("distance is undefined for a zero-norm descriptor")
    return d / norm


def descriptor_distance(d1, d2) -> float:
    """Squared Euclidean distance between the L2-normalized descriptors, in [0, 4]."""
    diff = _unit(d1) - _unit(d2)
    return float(np.dot(diff, diff))


def triplet_loss(d_a, d_p, d_n, margin: float = DEFAULT_MARGIN) -> float:
    if margin <= 0:
        raise ValueError("margin must be positive")
    return max(0.0, descriptor_distance(d_a, d_p) - descriptor_distance(d_a, d_n) + margin)


def distance_matrix(desc_a: np.ndarray, desc_b: np.ndarray) -> np.ndarray:
    """``out[i, j] = D(desc_a[i], desc_b[j])`` for descriptor rows of both modalities."""
    ua, ub = _unit(desc_a), _unit(desc_b)
    diff = ua[:, None, :] - ub[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


@dataclass(frozen=True)
class TripletBatch:
    """Index triples over a batch of ``N`` matched pairs.

    ``anchor_modality[k] == 0`` means the anchor is modality-0 descriptor
    ``anchor[k]`` while positive and negative index modality-1 descriptors;
    ``1`` is the mirrored direction.  Entries ``0..N-1`` hold the first
    direction and ``N..2N-1`` the second.
    """

    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    anchor_modality: np.ndarray

    def __len__(self) -> int:
        return len(self.anchor)

    @property
    def n_pairs(self) -> int:
        return len(self.anchor) // 2

    def negatives_for(self, modality: int) -> np.ndarray:
        return self.negative[self.anchor_modality == modality]


def _symmetric(negatives_0: np.ndarray, negatives_1: np.ndarray) -> TripletBatch:
    n = len(negatives_0)
    idx = np.arange(n)
    return TripletBatch(
        anchor=np.concatenate([idx, idx]),
        positive=np.concatenate([idx, idx]),
        negative=np.concatenate([negatives_0, negatives_1]).astype(np.int64),
        anchor_modality=np.repeat(np.array([0, 1]), n),
    )


def mine_hard_negatives(dm: np.ndarray) -> TripletBatch:
    """Closest non-matching cross-modal descriptor per anchor, ties to the lowest index.

    Row ``i`` of ``dm`` serves modality-0 anchor ``i``; column ``i`` serves
    modality-1 anchor ``i``.
    """
    dm = np.asarray(dm, dtype=np.float64)
    n = dm.shape[0]
    if dm.shape != (n, n):
        raise ValueError(f"distance matrix must be square, got {dm.shape}")
    if n < 2:
        raise ValueError("hard negative mining needs at least 2 pairs")
    masked = dm.copy()
    np.fill_diagonal(masked, np.inf)
    return _symmetric(np.argmin(masked, axis=1), np.argmin(masked, axis=0))


def sample_random_negatives(n: int, rng: np.random.Generator) -> TripletBatch:
    """Uniform non-matching index per anchor and direction."""
    if n < 2:
        raise ValueError("negative sampling needs at least 2 pairs")
    draws = rng.integers(0, n - 1, size=2 * n)
    idx = np.tile(np.arange(n), 2)
    neg = draws + (draws >= idx)
    return _symmetric(neg[:n], neg[n:])


def select_triplets(desc_a: np.ndarray, desc_b: np.ndarray, strategy: str, rng: np.random.Generator | None = None) -> TripletBatch:
    n = len(desc_a)
    if strategy == "hard":
        return mine_hard_negatives(distance_matrix(desc_a, desc_b))
    if strategy == "random":
        if rng is None:
            raise ValueError("random negative sampling needs an rng")
        return sample_random_negatives(n, rng)
    raise ValueError(f"unknown negative strategy {strategy!r}")


def batch_loss(
    desc_a: Tensor,
    desc_b: Tensor,
    strategy: str = "hard",
    margin: float = DEFAULT_MARGIN,
    rng: np.random.Generator | None = None,
    triplets: TripletBatch | None = None,
) -> Tensor:
    """Mean triplet margin loss over both anchor directions (2N triplets).

    ``desc_a`` holds modality-0 descriptors and ``desc_b`` their modality-1
    matches, row for row.  Negatives are chosen on detached values; pass
    ``triplets`` to fix them explicitly.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    if desc_a.shape != desc_b.shape or desc_a.ndim != 2:
        raise ValueError(f"descriptor batches must be matching [N, K] arrays, got {desc_a.shape} and {desc_b.shape}")
    n = desc_a.shape[0]
    if n < 2:
        raise ValueError("batch_loss needs at least 2 matched pairs")
    ua, ub = F.l2_normalize(desc_a), F.l2_normalize(desc_b)
    if triplets is None:
        triplets = select_triplets(ua.data, ub.data, strategy, rng)
    anchors = concat([ua, ub])
    positives = concat([ub, ua])
    negatives = concat([ub[triplets.negatives_for(0)], ua[triplets.negatives_for(1)]])
    d_ap = ((anchors - positives) ** 2).sum(axis=1)
    d_an = ((anchors - negatives) ** 2).sum(axis=1)
    return (d_ap - d_an + margin).relu().mean()
