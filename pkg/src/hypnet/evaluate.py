"""FPR95, ROC and exact nearest-neighbor descriptor matching."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .corpus import PatchCorpus
from .model import HypNetWeights, hypnet_forward, normalize_patches
from .tensor import Tensor, get_default_dtype, no_grad

RECALL = 0.95


def _scored(distances, labels) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(distances, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if d.shape != y.shape:
        raise ValueError("distances and labels must have equal length")
    if not y.any() or y.all():
        raise ValueError("need at least one match and one non-match")
    return d, y


def fpr95(distances, labels) -> float:
    """False positive rate at the smallest threshold reaching 95% recall.

    Both matches and non-matches count as accepted when ``distance <= tau``.
    """
    d, y = _scored(distances, labels)
    pos = np.sort(d[y])
    k = -(-95 * len(pos) // 100)  # ceil(0.95 * n) in exact integer arithmetic
    tau = pos[k - 1]
    return float(np.mean(d[~y] <= tau))


def roc_curve(distances, labels) -> list[tuple[float, float]]:
    """``(fpr, tpr)`` at every distinct distance threshold, in increasing order."""
    d, y = _scored(distances, labels)
    thresholds = np.unique(d)
    pos, neg = np.sort(d[y]), np.sort(d[~y])
    tpr = np.searchsorted(pos, thresholds, side="right") / len(pos)
    fpr = np.searchsorted(neg, thresholds, side="right") / len(neg)
    return list(zip(fpr.tolist(), tpr.tolist()))


def fpr_at_recall_from_roc(curve: list[tuple[float, float]], recall: float = RECALL) -> float:
    for fpr, tpr in curve:
        if tpr >= recall:
            return fpr
    raise ValueError("curve never reaches the requested recall")


def _unit_rows(d) -> np.ndarray:
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("zero-norm descriptor")
    return d / norm


def _sq_dist_rows(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    diff = q - g
    return np.einsum("ij,ij->i", diff, diff)


class DescriptorIndex:
    """Exact kd-tree over unit-normalized descriptors."""

    def __init__(self, gallery):
        self.gallery = _unit_rows(gallery)
        if len(self.gallery) == 0:
            raise ValueError("gallery is empty")
        self._tree = cKDTree(self.gallery)

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        q = _unit_rows(queries)
        _, idx = self._tree.query(q, k=1)
        idx = np.asarray(idx, dtype=np.int64)
        return idx, _sq_dist_rows(q, self.gallery[idx])


def match_descriptors(queries, gallery, method: str = "tree", chunk: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Nearest gallery index and descriptor distance for every query."""
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    if method == "tree":
        return DescriptorIndex(gallery).query(queries)
    if method != "brute":
        raise ValueError(f"unknown method {method!r}")
    q, g = _unit_rows(queries), _unit_rows(gallery)
    idx = np.empty(len(q), dtype=np.int64)
    for s in range(0, len(q), chunk):
        block = q[s : s + chunk]
        diff = block[:, None, :] - g[None, :, :]
        idx[s : s + chunk] = np.argmin(np.einsum("ijk,ijk->ij", diff, diff), axis=1)
    return idx, _sq_dist_rows(q, g[idx])


def describe(weights: HypNetWeights, patches: np.ndarray, modality: int, batch_size: int = 256) -> np.ndarray:
    """Eval-mode descriptors for 8-bit ``[n, H, W]`` patches, one forward per patch."""
    n = len(patches)
    out = np.empty((n, weights.arch.descriptor_dim), dtype=np.float64)
    dtype = get_default_dtype()
    with no_grad():
        for s in range(0, n, batch_size):
            x = normalize_patches(patches[s : s + batch_size])[:, None].astype(dtype)
            out[s : s + batch_size] = hypnet_forward(Tensor(x), modality, weights, "eval").data
    return out


def pair_distances(desc0: np.ndarray, desc1: np.ndarray, idx0: np.ndarray, idx1: np.ndarray) -> np.ndarray:
    return _sq_dist_rows(_unit_rows(np.asarray(desc0)[idx0]), _unit_rows(np.asarray(desc1)[idx1]))


@dataclass
class CategoryScore:
    category: str
    n_pairs: int
    fpr95: float


@dataclass
class EvalReport:
    categories: list[CategoryScore]
    mean: float
    n_descriptors: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("category,n_pairs,fpr95\n")
        for c in self.categories:
            buf.write(f"{c.category},{c.n_pairs},{c.fpr95:.6f}\n")
        buf.write(f"mean,{sum(c.n_pairs for c in self.categories)},{self.mean:.6f}\n")
        return buf.getvalue()


def split_descriptors(weights: HypNetWeights, corpus: PatchCorpus, split: str | None, batch_size: int = 256) -> tuple[list[np.ndarray], np.ndarray]:
    """Descriptors for every patch referenced by the rows of ``split``.

    Returns per-modality arrays indexed like ``corpus.patches`` (rows of
    unreferenced patches are left zero) and the selected row indices.
    """
    rows = corpus.rows(split)
    if len(rows) == 0:
        raise ValueError(f"corpus has no rows in split {split!r}")
    desc = []
    for m, idx in ((0, corpus.idx0), (1, corpus.idx1)):
        used = np.unique(idx[rows])
        full = np.zeros((len(corpus.patches[m]), weights.arch.descriptor_dim))
        full[used] = describe(weights, corpus.patches[m][used], m, batch_size)
        desc.append(full)
    return desc, rows


def evaluate_corpus(weights: HypNetWeights, corpus: PatchCorpus, split: str | None = "test", batch_size: int = 256) -> EvalReport:
    """FPR95 per category and their unweighted mean over the labeled rows of ``split``.

    Each referenced patch is described exactly once, whatever the number of
    rows that use it.
    """
    desc, rows = split_descriptors(weights, corpus, split, batch_size)
    n_described = len(np.unique(corpus.idx0[rows])) + len(np.unique(corpus.idx1[rows]))
    dist = pair_distances(desc[0], desc[1], corpus.idx0[rows], corpus.idx1[rows])
    labels = corpus.label[rows]
    cats = corpus.category[rows]
    scores = []
    for c in sorted(set(cats.tolist())):
        sel = cats == c
        scores.append(CategoryScore(c, int(sel.sum()), fpr95(dist[sel], labels[sel])))
    mean = float(np.mean([s.fpr95 for s in scores]))
    return EvalReport(scores, mean, n_described)
