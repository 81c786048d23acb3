"""Synthetic H&E-look regions for demos and tests.

Draws elliptical "nuclei" instances with class labels, renders hematoxylin
concentration inside nuclei and a smooth eosin field outside, and maps the
result through the optical-density inverse. The stain vectors are known
ground truth, which also makes these images useful fixtures for the stain
estimator.

Generate a demo dataset with::

    python -m histodiff.synthetic --out regions/ --count 4 --size 512 --seed 0
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .regions import AnnotatedRegion, save_region
from .stain import od_to_rgb

# Unit-norm OD color vectors, hematoxylin more blue-absorbing than eosin.
DEFAULT_HEMATOXYLIN = np.array([0.650, 0.704, 0.286])
DEFAULT_EOSIN = np.array([0.092, 0.954, 0.283])


def default_stain_matrix() -> np.ndarray:
    w = np.stack([DEFAULT_HEMATOXYLIN, DEFAULT_EOSIN], axis=1)
    return w / np.linalg.norm(w, axis=0, keepdims=True)


def _smooth_field(shape: tuple[int, int], rng: np.random.Generator, scale: int = 8) -> np.ndarray:
    """Low-frequency field in [0, 1] via bilinear upsampling of coarse noise."""
    coarse = rng.random((max(shape[0] // scale, 2), max(shape[1] // scale, 2)))
    rows = np.linspace(0, coarse.shape[0] - 1, shape[0])
    cols = np.linspace(0, coarse.shape[1] - 1, shape[1])
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    r1 = np.minimum(r0 + 1, coarse.shape[0] - 1)
    c1 = np.minimum(c0 + 1, coarse.shape[1] - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    top = coarse[r0][:, c0] * (1 - fc) + coarse[r0][:, c1] * fc
    bottom = coarse[r1][:, c0] * (1 - fc) + coarse[r1][:, c1] * fc
    return top * (1 - fr) + bottom * fr


def make_region(
    source_id: str,
    height: int = 512,
    width: int = 512,
    n_instances: int = 60,
    seed: int = 0,
    stain_matrix: np.ndarray | None = None,
    hematoxylin_strength: float = 0.9,
    eosin_strength: float = 0.5,
) -> AnnotatedRegion:
    """Build one annotated region with elliptical nuclei of random classes."""
    rng = np.random.default_rng(seed)
    w = default_stain_matrix() if stain_matrix is None else np.asarray(stain_matrix, dtype=np.float64)

    inst_map = np.zeros((height, width), dtype=np.int32)
    class_of_instance: dict[int, int] = {}
    rows, cols = np.indices((height, width))
    margin = max(2, min(8, height // 4, width // 4))
    radius_hi = max(3.5, min(9.0, height / 5.0))
    for inst_id in range(1, n_instances + 1):
        cy = rng.integers(margin, height - margin)
        cx = rng.integers(margin, width - margin)
        ry, rx = rng.uniform(3.0, radius_hi), rng.uniform(3.0, radius_hi)
        theta = rng.uniform(0, np.pi)
        dy, dx = rows - cy, cols - cx
        u = dy * np.cos(theta) + dx * np.sin(theta)
        v = -dy * np.sin(theta) + dx * np.cos(theta)
        inside = (u / ry) ** 2 + (v / rx) ** 2 <= 1.0
        inst_map[inside] = inst_id  # later instances overwrite earlier ones
        class_of_instance[inst_id] = int(rng.integers(1, 7))
    present = set(np.unique(inst_map).tolist()) - {0}
    class_of_instance = {k: v for k, v in class_of_instance.items() if k in present}

    hema = np.where(inst_map > 0, hematoxylin_strength, 0.05) * (
        0.7 + 0.6 * _smooth_field((height, width), rng)
    )
    eosin = eosin_strength * (0.35 + 0.9 * _smooth_field((height, width), rng))
    # Sparse white background pockets (lumen) with neither stain.
    lumen = (_smooth_field((height, width), rng, scale=16) > 0.82) & (inst_map == 0)
    hema[lumen] = 0.0
    eosin[lumen] = 0.0

    od = hema[..., None] * w[:, 0] + eosin[..., None] * w[:, 1]
    image = od_to_rgb(od)
    return AnnotatedRegion(
        image=image, inst_map=inst_map, class_of_instance=class_of_instance, source_id=source_id
    )


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="generate synthetic demo regions")
    parser.add_argument("--out", required=True, help="output directory for region .npz files")
    parser.add_argument("--count", type=int, default=4)
    parser.add_argument("--size", type=int, default=512)
    parser.add_argument("--instances", type=int, default=60)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    out = Path(args.out)
    for i in range(args.count):
        region = make_region(
            f"demo{i:03d}",
            height=args.size,
            width=args.size,
            n_instances=args.instances,
            seed=args.seed + i,
        )
        path = save_region(region, out)
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
