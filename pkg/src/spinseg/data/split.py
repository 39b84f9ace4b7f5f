"""Patient-level train/test split and the small-lesion image list."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..checkpoint import atomic_write_bytes
from .volume import Volume

SMALL_LESION_PIXELS = 100


@dataclass
class SplitManifest:
    train_ids: list[str]
    test_ids: list[str]
    small_lesion_images: list[tuple[str, int]] = field(default_factory=list)

    def __post_init__(self):
        both = set(self.train_ids) & set(self.test_ids)
        if both:
            raise ValueError(f"ids in both train and test: {sorted(both)}")

    def to_text(self) -> str:
        out = ["[train]", *self.train_ids, "", "[test]", *self.test_ids, "", "[small_lesion]"]
        out += [f"{vid} {t}" for vid, t in self.small_lesion_images]
        return "\n".join(out) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SplitManifest":
        sections: dict[str, list[str]] = {"train": [], "test": [], "small_lesion": []}
        current = None
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                if current not in sections:
                    raise ValueError(f"line {lineno}: unknown section [{current}]")
                continue
            if current is None:
                raise ValueError(f"line {lineno}: entry outside any section")
            sections[current].append(line)
        small = []
        for entry in sections["small_lesion"]:
            parts = entry.split()
            if len(parts) != 2:
                raise ValueError(f"small_lesion entry must be 'id slice_index', got {entry!r}")
            small.append((parts[0], int(parts[1])))
        return cls(sections["train"], sections["test"], small)


def small_lesion_images(volumes, ids=None) -> list[tuple[str, int]]:
    """(id, slice) pairs whose lesion pixel count lies in (0, 100)."""
    keep = None if ids is None else set(ids)
    out = []
    for v in volumes:
        if keep is not None and v.id not in keep:
            continue
        for t, n in enumerate(v.lesion_pixels()):
            if 0 < n < SMALL_LESION_PIXELS:
                out.append((v.id, t))
    return out


def build_split(volumes: list[Volume], rng: np.random.Generator, test_fraction: float) -> SplitManifest:
    ids = [v.id for v in volumes]
    if len(ids) < 2:
        raise ValueError("a split needs at least two volumes")
    if len(set(ids)) != len(ids):
        raise ValueError("volume ids must be unique")
    n_test = int(round(test_fraction * len(ids)))
    if n_test < 1 or n_test >= len(ids):
        raise ValueError(
            f"test_fraction {test_fraction} leaves an empty partition for {len(ids)} volumes"
        )
    order = rng.permutation(len(ids))
    test = sorted(ids[i] for i in order[:n_test])
    train = sorted(ids[i] for i in order[n_test:])
    test_vols = [v for v in volumes if v.id in set(test)]
    test_vols.sort(key=lambda v: v.id)
    return SplitManifest(train, test, small_lesion_images(test_vols))


def write_manifest(path, m: SplitManifest) -> None:
    atomic_write_bytes(path, m.to_text().encode())


def read_manifest(path) -> SplitManifest:
    return SplitManifest.from_text(Path(path).read_text())
