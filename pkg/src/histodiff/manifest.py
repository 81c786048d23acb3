"""Manifest-backed patch store.

Layout under a store root::

    patches/<split>_<magnification>/<patch_id>.png          lossless RGB
    patches/<split>_<magnification>/<patch_id>_labels.npz   class_map + inst_map
    manifest.tsv                                            one row per patch

The manifest is a tab-separated table with ``#``-prefixed header lines
carrying dataset-level stats (counts per split/magnification, per-class
pixel frequencies) and the region container choice.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .patching import PatchRecord
from .regions import REGION_CONTAINER, NucleiClass

_COLUMNS = ("patch_id", "source_id", "row", "col", "split", "magnification", "image", "labels")


@dataclass
class ManifestRow:
    patch_id: str
    source_id: str
    row: int
    col: int
    split: str
    magnification: str
    image: str  # store-relative path
    labels: str


@dataclass
class Manifest:
    rows: list[ManifestRow]
    counts: dict[tuple[str, str], int]  # (split, magnification) -> n patches
    class_pixels: dict[int, int]  # class code -> total pixel count
    header: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rows)

    def select(self, split: str | None = None, magnification: str | None = None) -> list[ManifestRow]:
        out = []
        for r in self.rows:
            if split is not None and r.split != split:
                continue
            if magnification is not None and r.magnification != magnification:
                continue
            out.append(r)
        return out


def _rel_paths(rec: PatchRecord) -> tuple[str, str]:
    d = f"patches/{rec.split}_{rec.magnification}"
    return f"{d}/{rec.patch_id}.png", f"{d}/{rec.patch_id}_labels.npz"


def build_manifest(patches: list[PatchRecord], header: dict[str, str] | None = None) -> Manifest:
    """Canonicalize a patch list into a manifest.

    Rows are ordered by (source_id, row, col, magnification); duplicate
    (source_id, origin, magnification) keys are rejected.
    """
    if not patches:
        raise DataError("cannot build a manifest from an empty patch list")
    seen: set[tuple[str, int, int, str]] = set()
    counts: dict[tuple[str, str], int] = {}
    class_pixels: dict[int, int] = {int(c): 0 for c in NucleiClass}
    rows: list[ManifestRow] = []
    for rec in sorted(patches, key=lambda p: (p.source_id, p.row, p.col, p.magnification)):
        key = (rec.source_id, rec.row, rec.col, rec.magnification)
        if key in seen:
            raise DataError(f"duplicate patch {key}")
        seen.add(key)
        counts[(rec.split, rec.magnification)] = counts.get((rec.split, rec.magnification), 0) + 1
        codes, freq = np.unique(rec.class_map, return_counts=True)
        for code, n in zip(codes.tolist(), freq.tolist()):
            class_pixels[int(code)] = class_pixels.get(int(code), 0) + int(n)
        image, labels = _rel_paths(rec)
        rows.append(
            ManifestRow(
                patch_id=rec.patch_id,
                source_id=rec.source_id,
                row=rec.row,
                col=rec.col,
                split=rec.split,
                magnification=rec.magnification,
                image=image,
                labels=labels,
            )
        )
    hdr = {"region_container": REGION_CONTAINER}
    if header:
        hdr.update(header)
    return Manifest(rows=rows, counts=counts, class_pixels=class_pixels, header=hdr)


def write_patches(patches: list[PatchRecord], store_root: str | Path) -> None:
    """Write patch images and label sidecars under ``store_root``."""
    store_root = Path(store_root)
    for rec in patches:
        image_rel, labels_rel = _rel_paths(rec)
        image_path = store_root / image_rel
        image_path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(rec.pixels).save(image_path, format="PNG")
        np.savez_compressed(
            store_root / labels_rel,
            class_map=rec.class_map.astype(np.int32),
            inst_map=rec.inst_map.astype(np.int32),
        )


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for k in sorted(manifest.header):
        lines.append(f"# {k} = {manifest.header[k]}")
    for (split, mag) in sorted(manifest.counts):
        lines.append(f"# count {split} {mag} = {manifest.counts[(split, mag)]}")
    total = sum(manifest.class_pixels.values())
    for code in sorted(manifest.class_pixels):
        n = manifest.class_pixels[code]
        lines.append(f"# class_pixels {code} = {n} ({n / max(total, 1):.6f})")
    lines.append("\t".join(_COLUMNS))
    for r in manifest.rows:
        lines.append(
            "\t".join(
                [r.patch_id, r.source_id, str(r.row), str(r.col), r.split, r.magnification, r.image, r.labels]
            )
        )
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    header: dict[str, str] = {}
    counts: dict[tuple[str, str], int] = {}
    class_pixels: dict[int, int] = {}
    rows: list[ManifestRow] = []
    saw_columns = False
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("count "):
                _, split, mag, _, n = body.split()
                counts[(split, mag)] = int(n)
            elif body.startswith("class_pixels "):
                parts = body.split()
                class_pixels[int(parts[1])] = int(parts[3])
            elif "=" in body:
                k, v = body.split("=", 1)
                header[k.strip()] = v.strip()
            continue
        parts = line.split("\t")
        if not saw_columns:
            if tuple(parts) != _COLUMNS:
                raise DataError(f"{path}:{lineno}: unexpected manifest columns {parts}")
            saw_columns = True
            continue
        if len(parts) != len(_COLUMNS):
            raise DataError(f"{path}:{lineno}: expected {len(_COLUMNS)} fields, got {len(parts)}")
        rows.append(
            ManifestRow(
                patch_id=parts[0],
                source_id=parts[1],
                row=int(parts[2]),
                col=int(parts[3]),
                split=parts[4],
                magnification=parts[5],
                image=parts[6],
                labels=parts[7],
            )
        )
    manifest = Manifest(rows=rows, counts=counts, class_pixels=class_pixels, header=header)
    for (split, mag), n in counts.items():
        have = len(manifest.select(split, mag))
        if have != n:
            raise DataError(f"{path}: header says {n} {split}/{mag} patches, table has {have}")
    return manifest


def load_patch_arrays(store_root: str | Path, row: ManifestRow) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Load (pixels, class_map, inst_map) for a manifest row."""
    store_root = Path(store_root)
    image_path = store_root / row.image
    labels_path = store_root / row.labels
    if not image_path.exists() or not labels_path.exists():
        raise DataError(f"patch files missing for {row.patch_id} under {store_root}")
    pixels = np.asarray(Image.open(image_path).convert("RGB"))
    with np.load(labels_path) as z:
        return pixels, z["class_map"].astype(np.int32), z["inst_map"].astype(np.int32)
