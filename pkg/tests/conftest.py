import numpy as np
import pytest
import torch

from histodiff.diffusion import pixels_to_unit
from histodiff.masks import encode
from histodiff.synthetic import make_region
from histodiff.training import PatchDataset


@pytest.fixture(scope="session")
def demo_region():
    return make_region("demo000", 256, 256, n_instances=25, seed=1)


@pytest.fixture(scope="session")
def tile_dataset():
    """16 synthetic 32x32 tiles with their conditioning masks."""
    tiles = [make_region(f"p{i:02d}", 32, 32, n_instances=4, seed=100 + i) for i in range(16)]
    images = torch.stack([pixels_to_unit(t.image) for t in tiles])
    masks = torch.stack(
        [torch.from_numpy(encode(t.class_map(), t.inst_map).layout) for t in tiles]
    )
    return PatchDataset(images, masks, ids=[t.source_id for t in tiles])


@pytest.fixture(scope="session")
def sparse_stain_image():
    """Synthetic image generated exactly as OD = W @ H with sparse H."""
    from histodiff.stain import od_to_rgb
    from histodiff.synthetic import default_stain_matrix

    rng = np.random.default_rng(0)
    w_true = default_stain_matrix()
    n = 96 * 96
    kind = rng.choice(3, size=n, p=[0.45, 0.35, 0.20])
    h = np.where(kind != 1, rng.uniform(0.3, 1.4, n), 0.0)
    e = np.where(kind != 0, rng.uniform(0.3, 1.4, n), 0.0)
    od = np.stack([h, e], axis=1) @ w_true.T
    return od_to_rgb(od).reshape(96, 96, 3), w_true
