"""Train/test zone splitting and overlapping patch extraction.

Each region donates a held-out test area made of patch-aligned blocks
(reproducible from a seed); the rest of the region is the train zone.
Zones are rectangle sets, and windows never cross a rectangle boundary, so
train and test pixels cannot leak into the same patch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from PIL import Image

from .errors import DataError
from .regions import AnnotatedRegion

PATCH_SIZE = 128

# Native crop window per objective magnification; 10x crops are resized to
# PATCH_SIZE after extraction.
WINDOW_BY_MAGNIFICATION = {"20x": 128, "10x": 256}


class Rect(NamedTuple):
    """Half-open pixel rectangle [top, bottom) x [left, right)."""

    top: int
    left: int
    bottom: int
    right: int

    @property
    def height(self) -> int:
        return self.bottom - self.top

    @property
    def width(self) -> int:
        return self.right - self.left

    @property
    def area(self) -> int:
        return self.height * self.width


@dataclass
class PatchRecord:
    """One training/test sample plus its provenance."""

    pixels: np.ndarray  # PATCH_SIZE x PATCH_SIZE x 3 uint8
    class_map: np.ndarray  # PATCH_SIZE x PATCH_SIZE int32, NucleiClass codes
    inst_map: np.ndarray  # PATCH_SIZE x PATCH_SIZE int32
    magnification: str  # "20x" | "10x"
    source_id: str
    row: int  # window top-left in native region coordinates
    col: int
    split: str  # "train" | "test"

    @property
    def patch_id(self) -> str:
        return f"{self.source_id}_{self.magnification}_r{self.row:06d}_c{self.col:06d}"


def _merge_cells(row_bounds: list[int], col_bounds: list[int], keep: np.ndarray) -> tuple[Rect, ...]:
    """Merge kept grid cells into disjoint rectangles.

    Per cell-row, runs of kept cells become strips; vertically adjacent
    strips with identical column spans are merged. Deterministic.
    """
    strips: list[Rect] = []
    n_rows, n_cols = keep.shape
    for i in range(n_rows):
        j = 0
        while j < n_cols:
            if not keep[i, j]:
                j += 1
                continue
            j0 = j
            while j < n_cols and keep[i, j]:
                j += 1
            strips.append(Rect(row_bounds[i], col_bounds[j0], row_bounds[i + 1], col_bounds[j]))
    merged: list[Rect] = []
    for strip in strips:
        for k, prev in enumerate(merged):
            if prev.bottom == strip.top and prev.left == strip.left and prev.right == strip.right:
                merged[k] = Rect(prev.top, prev.left, strip.bottom, strip.right)
                break
        else:
            merged.append(strip)
    return tuple(sorted(merged))


def split_region(
    region: AnnotatedRegion,
    test_fraction: float,
    rng_seed: int,
    granularity: int = PATCH_SIZE,
) -> tuple[tuple[Rect, ...], tuple[Rect, ...]]:
    """Carve a held-out test area out of a region.

    The test zone is a set of ``granularity``-aligned blocks sampled without
    replacement until it covers ``test_fraction`` of the region's area (to
    within one block); the train zone is everything else, including the
    ragged right/bottom margins. Returns ``(train_zone, test_zone)``.
    """
    if not 0.0 < test_fraction < 1.0:
        raise DataError(f"test_fraction must be in (0, 1), got {test_fraction}")
    h, w = region.height, region.width
    n_block_rows, n_block_cols = h // granularity, w // granularity
    if n_block_rows == 0 or n_block_cols == 0:
        raise DataError(
            f"region {region.source_id!r} ({h}x{w}) is smaller than one "
            f"{granularity}x{granularity} patch; rejected"
        )
    total_blocks = n_block_rows * n_block_cols
    n_test = int(round(test_fraction * h * w / granularity**2))
    n_test = max(1, min(n_test, total_blocks - 1)) if total_blocks > 1 else 1

    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(total_blocks, size=n_test, replace=False)
    test_cells = np.zeros((n_block_rows, n_block_cols), dtype=bool)
    test_cells[np.unravel_index(chosen, test_cells.shape)] = True

    row_bounds = [i * granularity for i in range(n_block_rows + 1)]
    col_bounds = [j * granularity for j in range(n_block_cols + 1)]
    test_zone = _merge_cells(row_bounds, col_bounds, test_cells)

    # Train cells live on an extended grid that includes the ragged margins.
    if h > n_block_rows * granularity:
        row_bounds = row_bounds + [h]
    if w > n_block_cols * granularity:
        col_bounds = col_bounds + [w]
    train_cells = np.ones((len(row_bounds) - 1, len(col_bounds) - 1), dtype=bool)
    train_cells[:n_block_rows, :n_block_cols] = ~test_cells
    train_zone = _merge_cells(row_bounds, col_bounds, train_cells)
    return train_zone, test_zone


def window_origins(rect: Rect, window: int, stride: int) -> list[tuple[int, int]]:
    """Top-left corners of all stride-aligned windows fully inside ``rect``."""
    rows = range(rect.top, rect.bottom - window + 1, stride)
    cols = range(rect.left, rect.right - window + 1, stride)
    return [(r, c) for r in rows for c in cols]


def _downsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    # Nearest-neighbor by strided sampling keeps label values categorical.
    return np.ascontiguousarray(labels[::factor, ::factor])


def _downsample_image(pixels: np.ndarray, size: int) -> np.ndarray:
    # Area averaging for photometric content.
    img = Image.fromarray(pixels).resize((size, size), Image.BOX)
    return np.asarray(img)


def extract_patches(
    region: AnnotatedRegion,
    zone: tuple[Rect, ...],
    magnification: str,
    overlap: float = 0.5,
    split: str = "train",
) -> list[PatchRecord]:
    """Extract overlapping fixed-size patches from a zone of ``region``.

    At 20x, windows are PATCH_SIZE pixels; at 10x, windows are twice that
    and are resized down to PATCH_SIZE (area averaging for pixels,
    nearest-neighbor for label maps). Stride is ``window * (1 - overlap)``.
    Rectangles too small for one window yield nothing.
    """
    if magnification not in WINDOW_BY_MAGNIFICATION:
        raise DataError(f"unknown magnification {magnification!r}; expected 20x or 10x")
    if not 0.0 <= overlap < 1.0:
        raise DataError(f"overlap must be in [0, 1), got {overlap}")
    window = WINDOW_BY_MAGNIFICATION[magnification]
    stride = int(round(window * (1.0 - overlap)))
    class_map = region.class_map()

    records: list[PatchRecord] = []
    for rect in zone:
        for r, c in window_origins(rect, window, stride):
            pixels = region.image[r : r + window, c : c + window]
            cls = class_map[r : r + window, c : c + window]
            inst = region.inst_map[r : r + window, c : c + window]
            if window != PATCH_SIZE:
                factor = window // PATCH_SIZE
                pixels = _downsample_image(pixels, PATCH_SIZE)
                cls = _downsample_labels(cls, factor)
                inst = _downsample_labels(inst, factor)
            records.append(
                PatchRecord(
                    pixels=np.ascontiguousarray(pixels),
                    class_map=cls.astype(np.int32),
                    inst_map=inst.astype(np.int32),
                    magnification=magnification,
                    source_id=region.source_id,
                    row=r,
                    col=c,
                    split=split,
                )
            )
    return records
