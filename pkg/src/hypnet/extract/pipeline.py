"""Cross-spectral patch extraction for one aligned image pair."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .detect import FAST_THRESHOLD, fast_detect, harris_response
from .orb import HAMMING_THRESHOLD, OrbDeduplicator

Cell = tuple[int, int]


@dataclass(frozen=True)
class ExtractionConfig:
    patch_size: int = 64
    grid: int = 16
    margin: int = 32
    harris_factor: float = 0.01
    t_intra: float = 0.5
    t_inter: float = 0.7
    n_target: int = 40
    fast_threshold: int = FAST_THRESHOLD
    orb_threshold: int = HAMMING_THRESHOLD

    def __post_init__(self):
        if not (0.0 < self.t_intra < 1.0 and 0.0 < self.t_inter < 1.0):
            raise ValueError("IoU thresholds must lie strictly between 0 and 1")
        if self.n_target < 4:
            raise ValueError("n_target must be at least 4")
        if self.patch_size < 1 or self.grid < 1 or self.margin < self.patch_size // 2:
            raise ValueError("margin must be at least half the patch size")

    def to_dict(self) -> dict[str, object]:
        return asdict(self)


@dataclass(frozen=True)
class PatchBox:
    """``size``-square patch centered on keypoint ``(x, y)``; pixel extent ``[x0, x0 + size)``."""

    x: int
    y: int
    modality: int
    score: float
    cell: Cell
    size: int = 64

    @property
    def x0(self) -> int:
        return self.x - self.size // 2

    @property
    def y0(self) -> int:
        return self.y - self.size // 2

    def bounds(self) -> tuple[int, int, int, int]:
        return self.x0, self.y0, self.x0 + self.size, self.y0 + self.size

    def crop(self, img: np.ndarray) -> np.ndarray:
        x0, y0, x1, y1 = self.bounds()
        if x0 < 0 or y0 < 0 or y1 > img.shape[0] or x1 > img.shape[1]:
            raise ValueError(f"box {self.bounds()} leaves image of shape {img.shape}")
        return img[y0:y1, x0:x1]


def cell_of(x, y, grid: int):
    return y // grid, x // grid


def border_distance(xy: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    x, y = xy[:, 0], xy[:, 1]
    return np.minimum(np.minimum(x, y), np.minimum(w - x, h - y))


def filter_and_grid(xy: np.ndarray, scores: np.ndarray, cfg: ExtractionConfig, shape: tuple[int, int]) -> np.ndarray:
    """Indices of keypoints surviving the margin, score and one-per-cell filters.

    The score threshold is ``harris_factor * s_max`` with ``s_max`` taken
    after margin removal.  Within a cell the highest score wins; equal
    scores go to the earlier keypoint.  Result is in input order.
    """
    xy = np.asarray(xy, dtype=np.int64).reshape(-1, 2)
    scores = np.asarray(scores, dtype=np.float64)
    idx = np.flatnonzero(border_distance(xy, shape) >= cfg.margin)
    if len(idx) == 0:
        return idx
    idx = idx[scores[idx] >= cfg.harris_factor * scores[idx].max()]
    best: dict[Cell, int] = {}
    for i in idx:
        cell = cell_of(int(xy[i, 0]), int(xy[i, 1]), cfg.grid)
        j = best.get(cell)
        if j is None or scores[i] > scores[j]:
            best[cell] = int(i)
    return np.sort(np.fromiter(best.values(), dtype=np.int64, count=len(best)))


def moore(cells) -> set[Cell]:
    return {(r + dr, c + dc) for r, c in cells for dr in (-1, 0, 1) for dc in (-1, 0, 1)}


def cross_modal_cells(cells_a, cells_b) -> set[Cell]:
    """Cells whose 3x3 neighborhood touches occupied cells in both modalities."""
    return moore(cells_a) & moore(cells_b)


def iou(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def _iou_one_to_many(box: np.ndarray, others: np.ndarray) -> np.ndarray:
    iw = np.minimum(box[2], others[:, 2]) - np.maximum(box[0], others[:, 0])
    ih = np.minimum(box[3], others[:, 3]) - np.maximum(box[1], others[:, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area = (box[2] - box[0]) * (box[3] - box[1])
    areas = (others[:, 2] - others[:, 0]) * (others[:, 3] - others[:, 1])
    return inter / (area + areas - inter)


def score_order(scores) -> np.ndarray:
    """Descending score, ties by ascending index."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def nms(boxes, scores, threshold: float) -> np.ndarray:
    """Greedy IoU suppression; returns kept indices in scan order.

    Boxes are ``(x0, y0, x1, y1)``.  A box is kept when its IoU with every
    box kept before it is below ``threshold``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    kept: list[int] = []
    for i in score_order(scores):
        if not kept or _iou_one_to_many(boxes[i], boxes[kept]).max() < threshold:
            kept.append(int(i))
    return np.asarray(kept, dtype=np.int64)


def select_top_and_sample(scores, n_target: int, rng: np.random.Generator) -> np.ndarray:
    """Top ``n_target // 4`` by score plus ``ceil(n_target / 4)`` sampled from the rest.

    Returns indices in descending-score order; all indices when there are
    not enough candidates to choose from.
    """
    if n_target < 4:
        raise ValueError("n_target must be at least 4")
    order = score_order(scores)
    n_top, n_sample = n_target // 4, -(-n_target // 4)
    if len(order) <= n_top + n_sample:
        return order
    rest = order[n_top:]
    picked = np.sort(rng.choice(len(rest), size=n_sample, replace=False))
    return np.concatenate([order[:n_top], rest[picked]])


@dataclass
class ModalityKeypoints:
    xy: np.ndarray
    scores: np.ndarray
    cells: list[Cell]


def detect_filtered(img: np.ndarray, cfg: ExtractionConfig) -> ModalityKeypoints:
    """FAST keypoints scored by Harris response, then margin/score/grid filtered."""
    response = harris_response(img)
    xy = fast_detect(img, cfg.fast_threshold)
    scores = response[xy[:, 1], xy[:, 0]] if len(xy) else np.zeros(0)
    keep = filter_and_grid(xy, scores, cfg, img.shape)
    xy, scores = xy[keep], scores[keep]
    cells = [cell_of(int(x), int(y), cfg.grid) for x, y in xy]
    return ModalityKeypoints(xy, scores, cells)


def extract_pair(
    img_a: np.ndarray,
    img_b: np.ndarray,
    cfg: ExtractionConfig,
    rng: np.random.Generator,
    dedup: OrbDeduplicator | None = None,
) -> list[PatchBox]:
    """Patch boxes selected from an aligned 8-bit image pair, in final scan order.

    Each box carries the modality whose keypoint produced it; since the
    images are aligned, the same box locates the matching patch in both.
    """
    img_a, img_b = np.asarray(img_a), np.asarray(img_b)
    if img_a.shape != img_b.shape or img_a.ndim != 2:
        raise ValueError(f"images must be aligned 2-D arrays of one shape, got {img_a.shape} and {img_b.shape}")
    if min(img_a.shape) < cfg.patch_size:
        raise ValueError(f"image {img_a.shape} is smaller than the {cfg.patch_size}-pixel patch")

    kps = [detect_filtered(img, cfg) for img in (img_a, img_b)]
    common = cross_modal_cells(kps[0].cells, kps[1].cells)

    per_modality: list[list[PatchBox]] = []
    for m, kp in enumerate(kps):
        boxes = [
            PatchBox(int(x), int(y), m, float(s), cell, cfg.patch_size)
            for (x, y), s, cell in zip(kp.xy, kp.scores, kp.cells)
            if cell in common
        ]
        if boxes:
            kept = nms([b.bounds() for b in boxes], [b.score for b in boxes], cfg.t_intra)
            boxes = [boxes[i] for i in kept]
            chosen = select_top_and_sample([b.score for b in boxes], cfg.n_target, rng)
            boxes = [boxes[i] for i in chosen]
        per_modality.append(boxes)

    if dedup is not None:
        for m, img in enumerate((img_a, img_b)):
            flags = dedup.filter([(b.crop(img), m, b.cell) for b in per_modality[m]])
            per_modality[m] = [b for b, k in zip(per_modality[m], flags) if k]

    merged = per_modality[0] + per_modality[1]
    if not merged:
        return []
    kept = nms([b.bounds() for b in merged], [b.score for b in merged], cfg.t_inter)
    return [merged[i] for i in kept]
