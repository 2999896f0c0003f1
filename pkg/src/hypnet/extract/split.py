"""Train/val/test split protocols over image-pair manifests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RATIOS = (0.7, 0.1, 0.2)
PROTOCOLS = ("sequential", "camera-group", "day-night")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path_a: str
    path_b: str
    group: str = ""
    day_night: str = ""


def split_counts(n: int, ratios: tuple[float, float, float] = RATIOS) -> tuple[int, int, int]:
    """Sizes of the three parts, each ratio rounded half up and test taking the rest."""
    n_train = int(np.floor(ratios[0] * n + 0.5))
    n_val = min(int(np.floor(ratios[1] * n + 0.5)), n - n_train)
    return n_train, n_val, n - n_train - n_val


def _label_sequence(n: int, ratios) -> list[str]:
    a, b, c = split_counts(n, ratios)
    return ["train"] * a + ["val"] * b + ["test"] * c


def _sequential(entries: list[ManifestEntry], ratios) -> dict[str, str]:
    ordered = sorted(entries, key=lambda e: e.id)
    return {e.id: s for e, s in zip(ordered, _label_sequence(len(ordered), ratios))}


def _camera_group(entries: list[ManifestEntry], ratios) -> dict[str, str]:
    missing = [e.id for e in entries if not e.group]
    if missing:
        raise ValueError(f"camera-group protocol needs a group key; missing for {missing[:5]}")
    groups = sorted({e.group for e in entries})
    of_group = dict(zip(groups, _label_sequence(len(groups), ratios)))
    return {e.id: of_group[e.group] for e in entries}


def _day_night(entries: list[ManifestEntry], ratios) -> dict[str, str]:
    parts: dict[str, list[ManifestEntry]] = {"day": [], "night": []}
    for e in entries:
        flag = e.day_night.strip().lower()
        if flag not in parts:
            raise ValueError(f"day-night protocol needs a day or night flag; got {e.day_night!r} for {e.id}")
        parts[flag].append(e)
    out: dict[str, str] = {}
    for part in parts.values():
        out.update(_sequential(part, ratios))
    return out


def split_dataset(entries: list[ManifestEntry], protocol: str = "sequential", ratios=RATIOS) -> dict[str, str]:
    """Map each entry id to ``train``, ``val`` or ``test``.

    ``sequential`` splits the lexically sorted ids; ``camera-group`` splits
    the sorted group keys so a camera never straddles two parts;
    ``day-night`` splits the day and night subsets sequentially on their own.
    """
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise ValueError("manifest ids must be unique")
    if protocol == "sequential":
        return _sequential(entries, ratios)
    if protocol == "camera-group":
        return _camera_group(entries, ratios)
    if protocol == "day-night":
        return _day_night(entries, ratios)
    raise ValueError(f"unknown split protocol {protocol!r}; expected one of {PROTOCOLS}")
