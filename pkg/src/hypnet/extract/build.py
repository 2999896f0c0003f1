"""Turn a manifest of aligned image pairs into an on-disk patch corpus."""

from __future__ import annotations

import csv
import json
import logging
import multiprocessing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..corpus import SPLITS, pair_rows, save_patch, write_index
from .orb import OrbDeduplicator
from .pipeline import ExtractionConfig, PatchBox, extract_pair
from .split import ManifestEntry, split_dataset

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("id", "path_a", "path_b", "group", "day_night")
DEFAULT_GROUP = "all"


def read_manifest(path: Path) -> list[ManifestEntry]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        missing = {"id", "path_a", "path_b"} - set(fields)
        if fields and missing:
            raise ValueError(f"{path}: manifest is missing columns {sorted(missing)}")
        return [
            ManifestEntry(
                id=row["id"].strip(),
                path_a=row["path_a"].strip(),
                path_b=row["path_b"].strip(),
                group=(row.get("group") or "").strip(),
                day_night=(row.get("day_night") or "").strip(),
            )
            for row in reader
        ]


def load_gray(path: Path) -> np.ndarray:
    """8-bit grayscale pixels; color images go through the Rec. 601 luma transform."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


@dataclass
class PairResult:
    id: str
    boxes: list[PatchBox] = field(default_factory=list)
    crops: tuple[list[np.ndarray], list[np.ndarray]] = field(default_factory=lambda: ([], []))
    error: str | None = None


def _extract_unit(args) -> list[PairResult]:
    """Extract a run of pairs in order; pairs sharing a dedup cache form one run."""
    items, base_dir, cfg, seed, use_dedup = args
    dedup = OrbDeduplicator(cfg.orb_threshold) if use_dedup else None
    out = []
    for position, entry in items:
        try:
            img_a = load_gray(base_dir / entry.path_a)
            img_b = load_gray(base_dir / entry.path_b)
            boxes = extract_pair(img_a, img_b, cfg, np.random.default_rng([seed, position]), dedup)
        except (OSError, ValueError) as exc:
            out.append(PairResult(entry.id, error=str(exc)))
            continue
        crops = ([b.crop(img_a).copy() for b in boxes], [b.crop(img_b).copy() for b in boxes])
        out.append(PairResult(entry.id, boxes, crops))
    return out


def extract_all(
    entries: list[ManifestEntry],
    base_dir: Path,
    cfg: ExtractionConfig,
    seed: int,
    workers: int = 1,
    dedup: bool = False,
) -> list[PairResult]:
    """Per-pair results in lexical id order; identical for any worker count."""
    ordered = sorted(entries, key=lambda e: e.id)
    indexed = list(enumerate(ordered))
    if dedup:
        # frames of one camera group share a cache and run in order
        groups: dict[str, list] = {}
        for item in indexed:
            groups.setdefault(item[1].group, []).append(item)
        units = [groups[g] for g in sorted(groups)]
    else:
        units = [[item] for item in indexed]
    jobs = [(unit, Path(base_dir), cfg, seed, dedup) for unit in units]
    if workers > 1 and len(jobs) > 1:
        with multiprocessing.get_context("spawn").Pool(workers) as pool:
            chunks = pool.map(_extract_unit, jobs)
    else:
        chunks = [_extract_unit(job) for job in jobs]
    by_id = {r.id: r for chunk in chunks for r in chunk}
    return [by_id[e.id] for e in ordered]


def build_corpus(
    entries: list[ManifestEntry],
    base_dir: Path,
    out_dir: Path,
    cfg: ExtractionConfig,
    seed: int,
    protocol: str = "sequential",
    workers: int = 1,
    dedup: bool = False,
    on_error: str = "abort",
) -> dict[str, object]:
    """Extract, split and write the corpus; returns the metadata that was written.

    Each kept box yields a matched pair cropped at the same location from
    both images.  Non-matches pair a modality-0 patch with a different patch
    of the same split and source group.
    """
    if on_error not in ("abort", "skip"):
        raise ValueError(f"on_error must be 'abort' or 'skip', got {on_error!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not entries:
        log.warning("manifest is empty; writing an empty corpus")
    splits = split_dataset(entries, protocol) if entries else {}
    groups = {e.id: e.group or DEFAULT_GROUP for e in entries}

    results = extract_all(entries, base_dir, cfg, seed, workers, dedup)
    skipped = []
    for r in results:
        if r.error is not None:
            if on_error == "abort":
                raise OSError(f"pair {r.id}: {r.error}")
            log.warning("skipping pair %s: %s", r.id, r.error)
            skipped.append({"id": r.id, "error": r.error})

    # every emitted patch pair, in a fixed order
    patches: list[tuple[str, int, str, str]] = []
    for r in results:
        for k in range(len(r.boxes)):
            names = [f"{r.id}_{m}_{k}.png" for m in (0, 1)]
            for m in (0, 1):
                save_patch(out_dir / names[m], r.crops[m][k])
            patches.append((r.id, k, names[0], names[1]))

    rows = []
    rng = np.random.default_rng([seed, 0, 1])  # distinct from the per-pair streams
    for split in SPLITS:
        for group in sorted({groups[p[0]] for p in patches}):
            members = [p for p in patches if splits[p[0]] == split and groups[p[0]] == group]
            for a, b, label in pair_rows(len(members), rng):
                pa, pb = members[a], members[b]
                rows.append(
                    {
                        "id": f"{pa[0]}_{pa[1]}" + ("" if label else f"_x_{pb[0]}_{pb[1]}"),
                        "path_mod0": pa[2],
                        "path_mod1": pb[3],
                        "label": label,
                        "split": split,
                        "source_group": group,
                    }
                )
    write_index(out_dir / "index.csv", rows)

    meta = {
        "seed": seed,
        "extraction": cfg.to_dict(),
        "split_protocol": protocol,
        "dedup": dedup,
        "pairs": [
            {
                "id": r.id,
                "split": splits.get(r.id),
                "group": groups.get(r.id),
                "boxes": [[b.x, b.y, b.modality, b.score] for b in r.boxes],
            }
            for r in results
            if r.error is None
        ],
        "skipped": skipped,
        "n_patch_pairs": len(patches),
    }
    (out_dir / "metadata.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8", newline="")
    return meta
