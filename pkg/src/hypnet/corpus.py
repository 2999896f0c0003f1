"""Labeled patch-pair corpora in memory and on disk.

On disk a corpus is a directory of 8-bit grayscale PNG patches plus
``index.csv`` with columns ``id, path_mod0, path_mod1, label, split,
source_group``.  Paths are relative to the corpus directory.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

INDEX_COLUMNS = ("id", "path_mod0", "path_mod1", "label", "split", "source_group")
SPLITS = ("train", "val", "test")


@dataclass
class PatchCorpus:
    """Patches of both modalities plus labeled pair rows referencing them.

    Row ``r`` compares ``patches[0][idx0[r]]`` with ``patches[1][idx1[r]]``;
    ``label`` is 1 for a match and 0 for a non-match.
    """

    patches: tuple[np.ndarray, np.ndarray]
    idx0: np.ndarray
    idx1: np.ndarray
    label: np.ndarray
    split: np.ndarray
    category: np.ndarray
    ids: np.ndarray | None = None
    names: tuple[list[str], list[str]] | None = None

    def __len__(self) -> int:
        return len(self.label)

    def rows(self, split: str | None = None) -> np.ndarray:
        if split is None:
            return np.arange(len(self))
        return np.flatnonzero(self.split == split)

    def matched(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """Patch arrays of the matched pairs in ``split``, modality 0 then 1."""
        r = self.rows(split)
        r = r[self.label[r] == 1]
        return self.patches[0][self.idx0[r]], self.patches[1][self.idx1[r]]

    def has_split(self, split: str) -> bool:
        return bool(np.any((self.split == split) & (self.label == 1)))


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random permutation without fixed points (Sattolo's single-cycle shuffle)."""
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def pair_rows(n: int, rng: np.random.Generator) -> list[tuple[int, int, int]]:
    """One match ``(k, k, 1)`` per pair plus one non-match ``(k, j != k, 0)`` per pair."""
    rows = [(k, k, 1) for k in range(n)]
    if n >= 2:
        partner = derangement(n, rng)
        rows += [(k, int(partner[k]), 0) for k in range(n)]
    return rows


def from_pairs(
    mod0: np.ndarray,
    mod1: np.ndarray,
    split: np.ndarray,
    category: np.ndarray | None = None,
    seed: int = 0,
) -> PatchCorpus:
    """Build a corpus from aligned matched pairs, adding non-matches within each split and category."""
    n = len(mod0)
    split = np.asarray(split)
    category = np.asarray(category) if category is not None else np.full(n, "all")
    rng = np.random.default_rng(seed)
    idx0, idx1, label, sp, cat = [], [], [], [], []
    for s in SPLITS:
        for c in sorted(set(category[split == s])):
            members = np.flatnonzero((split == s) & (category == c))
            for a, b, lab in pair_rows(len(members), rng):
                idx0.append(members[a])
                idx1.append(members[b])
                label.append(lab)
                sp.append(s)
                cat.append(c)
    return PatchCorpus(
        patches=(np.asarray(mod0, dtype=np.uint8), np.asarray(mod1, dtype=np.uint8)),
        idx0=np.asarray(idx0, dtype=np.int64),
        idx1=np.asarray(idx1, dtype=np.int64),
        label=np.asarray(label, dtype=np.int64),
        split=np.asarray(sp),
        category=np.asarray(cat),
    )


def read_index(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(INDEX_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: index is missing columns {sorted(missing)}")
        return list(reader)


def write_index(path: Path, rows: list[dict[str, object]]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=INDEX_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row[k] for k in INDEX_COLUMNS})
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


def load_patch(path: Path) -> np.ndarray:
    if not Path(path).is_file():
        raise FileNotFoundError(f"missing patch file: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def save_patch(path: Path, patch: np.ndarray) -> None:
    Image.fromarray(np.asarray(patch, dtype=np.uint8), mode="L").save(path, format="PNG")


def load_corpus(directory: Path, splits: tuple[str, ...] | None = None) -> PatchCorpus:
    """Load ``index.csv`` and every referenced patch (each file read once)."""
    directory = Path(directory)
    rows = read_index(directory / "index.csv")
    if splits is not None:
        rows = [r for r in rows if r["split"] in splits]
    names: tuple[list[str], list[str]] = ([], [])
    lookup: tuple[dict[str, int], dict[str, int]] = ({}, {})
    idx = ([], [])
    for row in rows:
        for m in (0, 1):
            rel = row[f"path_mod{m}"]
            if rel not in lookup[m]:
                lookup[m][rel] = len(names[m])
                names[m].append(rel)
            idx[m].append(lookup[m][rel])
    patches = tuple(
        np.stack([load_patch(directory / rel) for rel in names[m]]) if names[m] else np.zeros((0, 64, 64), np.uint8)
        for m in (0, 1)
    )
    return PatchCorpus(
        patches=patches,  # type: ignore[arg-type]
        idx0=np.asarray(idx[0], dtype=np.int64),
        idx1=np.asarray(idx[1], dtype=np.int64),
        label=np.asarray([int(r["label"]) for r in rows], dtype=np.int64),
        split=np.asarray([r["split"] for r in rows]),
        category=np.asarray([r["source_group"] for r in rows]),
        ids=np.asarray([r["id"] for r in rows]),
        names=names,
    )


def write_corpus(directory: Path, corpus: PatchCorpus) -> None:
    """Write an in-memory corpus (e.g. a synthetic one) in the on-disk layout."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for m in (0, 1):
        names.append([f"patch_{m}_{k:06d}.png" for k in range(len(corpus.patches[m]))])
        for name, patch in zip(names[m], corpus.patches[m]):
            save_patch(directory / name, patch)
    rows = [
        {
            "id": f"row{r:06d}",
            "path_mod0": names[0][corpus.idx0[r]],
            "path_mod1": names[1][corpus.idx1[r]],
            "label": int(corpus.label[r]),
            "split": corpus.split[r],
            "source_group": corpus.category[r],
        }
        for r in range(len(corpus))
    ]
    write_index(directory / "index.csv", rows)
