import numpy as np
import pytest

from histodiff.errors import DataError
from histodiff.manifest import build_manifest, load_patch_arrays, read_manifest, write_manifest, write_patches
from histodiff.patching import Rect, extract_patches, split_region


@pytest.fixture()
def patches(demo_region):
    train, test = split_region(demo_region, 0.25, rng_seed=0)
    return extract_patches(demo_region, train, "20x", split="train") + extract_patches(
        demo_region, test, "20x", split="test"
    )


def test_counts(patches):
    m = build_manifest(patches)
    n_train = sum(1 for p in patches if p.split == "train")
    n_test = len(patches) - n_train
    assert m.counts[("train", "20x")] == n_train
    assert m.counts[("test", "20x")] == n_test
    assert len(m) == len(patches)
    total_pixels = sum(m.class_pixels.values())
    assert total_pixels == len(patches) * 128 * 128


def test_order_canonicalized(patches):
    rng = np.random.default_rng(3)
    shuffled = [patches[i] for i in rng.permutation(len(patches))]
    a = build_manifest(patches)
    b = build_manifest(shuffled)
    assert [r.patch_id for r in a.rows] == [r.patch_id for r in b.rows]
    keys = [(r.source_id, r.row, r.col) for r in a.rows]
    assert keys == sorted(keys)


def test_duplicate_rejected(patches):
    with pytest.raises(DataError, match="duplicate"):
        build_manifest(patches + [patches[0]])


def test_empty_rejected():
    with pytest.raises(DataError):
        build_manifest([])


def test_round_trip(tmp_path, patches):
    m = build_manifest(patches, header={"stain_target": "demo000"})
    path = tmp_path / "manifest.tsv"
    write_manifest(m, path)
    back = read_manifest(path)
    assert len(back) == len(m)
    assert back.counts == m.counts
    assert back.header["stain_target"] == "demo000"
    assert back.header["region_container"].startswith("npz[")
    assert [r.patch_id for r in back.rows] == [r.patch_id for r in m.rows]


def test_store_round_trip(tmp_path, patches):
    m = build_manifest(patches[:4])
    write_patches(patches[:4], tmp_path)
    by_id = {p.patch_id: p for p in patches[:4]}
    for row in m.rows:
        pixels, class_map, inst_map = load_patch_arrays(tmp_path, row)
        src = by_id[row.patch_id]
        assert (pixels == src.pixels).all()
        assert (class_map == src.class_map).all()
        assert (inst_map == src.inst_map).all()


def test_header_count_mismatch_detected(tmp_path, patches):
    m = build_manifest(patches[:3])
    path = tmp_path / "manifest.tsv"
    write_manifest(m, path)
    text = path.read_text().replace("# count train 20x = 3", "# count train 20x = 5")
    path.write_text(text)
    with pytest.raises(DataError, match="header says"):
        read_manifest(path)
