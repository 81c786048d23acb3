"""Annotated tissue regions and their on-disk container.

A region is a stained RGB image plus an instance map (0 = background,
k > 0 = nucleus instance k) and a table assigning each instance one of six
nuclei classes.  Regions are stored one-per-file as ``<source_id>.npz``
with keys ``image`` (HxWx3 uint8), ``inst_map`` (HxW int32), ``inst_ids``
(K int32) and ``inst_classes`` (K int32); the container choice is recorded
in every manifest header so stores stay self-describing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import DataError

REGION_CONTAINER = "npz[image,inst_map,inst_ids,inst_classes]"


class NucleiClass(IntEnum):
    """Integer codes follow the Lizard label convention."""

    BACKGROUND = 0
    NEUTROPHIL = 1
    EPITHELIAL = 2
    LYMPHOCYTE = 3
    PLASMA = 4
    EOSINOPHIL = 5
    CONNECTIVE = 6


N_FOREGROUND_CLASSES = 6
CLASS_CODES = {c.name.lower(): int(c) for c in NucleiClass}


@dataclass
class AnnotatedRegion:
    """One annotated H&E region: pixels, instances, and per-instance classes."""

    image: np.ndarray
    inst_map: np.ndarray
    class_of_instance: dict[int, int]
    source_id: str

    def __post_init__(self) -> None:
        self.image = np.asarray(self.image)
        self.inst_map = np.asarray(self.inst_map)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataError(
                f"region {self.source_id!r}: image must be HxWx3, got {self.image.shape}"
            )
        if self.image.dtype != np.uint8:
            raise DataError(f"region {self.source_id!r}: image must be uint8")
        if self.inst_map.shape != self.image.shape[:2]:
            raise DataError(
                f"region {self.source_id!r}: inst_map shape {self.inst_map.shape} "
                f"does not match image {self.image.shape[:2]}"
            )
        if self.inst_map.min() < 0:
            raise DataError(f"region {self.source_id!r}: negative instance ids")
        present = set(np.unique(self.inst_map).tolist()) - {0}
        missing = present - set(self.class_of_instance)
        if missing:
            raise DataError(
                f"region {self.source_id!r}: instances without a class entry: "
                f"{sorted(missing)[:10]}"
            )
        bad = [c for c in self.class_of_instance.values() if not 1 <= int(c) <= 6]
        if bad:
            raise DataError(
                f"region {self.source_id!r}: class codes outside 1..6: {sorted(set(bad))}"
            )

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def class_map(self) -> np.ndarray:
        """Per-pixel class codes derived from the instance map (0 = background)."""
        lut = np.zeros(int(self.inst_map.max()) + 1, dtype=np.int32)
        for inst, cls in self.class_of_instance.items():
            if inst <= self.inst_map.max():
                lut[inst] = cls
        return lut[self.inst_map]


@dataclass
class RegionStore:
    """Directory of ``<source_id>.npz`` region files."""

    root: Path
    source_ids: list[str] = field(default_factory=list)

    @classmethod
    def open(cls, root: str | Path) -> "RegionStore":
        root = Path(root)
        if not root.is_dir():
            raise DataError(f"regions directory not found: {root}")
        ids = sorted(p.stem for p in root.glob("*.npz"))
        if not ids:
            raise DataError(f"no .npz region files in {root}")
        return cls(root=root, source_ids=ids)

    def load(self, source_id: str) -> AnnotatedRegion:
        return load_region(self.root / f"{source_id}.npz")

    def __iter__(self):
        for sid in self.source_ids:
            yield self.load(sid)


def load_region(path: str | Path) -> AnnotatedRegion:
    path = Path(path)
    if not path.exists():
        raise DataError(f"region file not found: {path}")
    with np.load(path) as z:
        for key in ("image", "inst_map", "inst_ids", "inst_classes"):
            if key not in z:
                raise DataError(f"{path}: missing key {key!r} (expect {REGION_CONTAINER})")
        table = dict(
            zip(z["inst_ids"].astype(int).tolist(), z["inst_classes"].astype(int).tolist())
        )
        return AnnotatedRegion(
            image=z["image"],
            inst_map=z["inst_map"].astype(np.int32),
            class_of_instance=table,
            source_id=path.stem,
        )


def save_region(region: AnnotatedRegion, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{region.source_id}.npz"
    ids = np.array(sorted(region.class_of_instance), dtype=np.int32)
    classes = np.array([region.class_of_instance[i] for i in ids], dtype=np.int32)
    np.savez_compressed(
        path,
        image=region.image,
        inst_map=region.inst_map.astype(np.int32),
        inst_ids=ids,
        inst_classes=classes,
    )
    return path
