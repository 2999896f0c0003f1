from .detect import fast_detect, harris_response
from .orb import OrbDeduplicator, hamming, orb_descriptor
from .pipeline import (
    ExtractionConfig,
    PatchBox,
    cross_modal_cells,
    extract_pair,
    filter_and_grid,
    iou,
    nms,
    select_top_and_sample,
)
from .split import ManifestEntry, split_dataset

__all__ = [
    "ExtractionConfig",
    "ManifestEntry",
    "OrbDeduplicator",
    "PatchBox",
    "cross_modal_cells",
    "extract_pair",
    "fast_detect",
    "filter_and_grid",
    "hamming",
    "harris_response",
    "iou",
    "nms",
    "orb_descriptor",
    "select_top_and_sample",
    "split_dataset",
]
