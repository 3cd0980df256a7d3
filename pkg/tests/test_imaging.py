import struct

import numpy as np
import pytest

from spixel.errors import ConsistencyError, FormatError, StratificationError
from spixel.imaging import (IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC, Image,
                            LabeledDataset, load_idx, load_image_dir, load_pnm,
                            save_idx, save_pnm, stratified_split,
                            stratified_split_indices, stratified_subset_indices)


def write_idx_pair(tmp_path, pixels_bytes, labels, shape):
    n, h, w = shape
    images_path = tmp_path / "images-idx3-ubyte"
    labels_path = tmp_path / "labels-idx1-ubyte"
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        f.write(bytes(pixels_bytes))
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, len(labels)))
        f.write(bytes(labels))
    return images_path, labels_path


def test_load_idx_scales_bytes(tmp_path):
    images_path, labels_path = write_idx_pair(tmp_path, [0, 85, 170, 255], [7], (1, 2, 2))
    ds = load_idx(images_path, labels_path)
    np.testing.assert_allclose(ds.images[0, 0],
                               [[0.0, 1 / 3], [2 / 3, 1.0]], atol=1e-6)
    assert ds.labels[0] == 7 and ds.num_classes == 8


def test_load_idx_bad_magic_names_file(tmp_path):
    images_path = tmp_path / "bad"
    images_path.write_bytes(struct.pack(">IIII", 0xdeadbeef, 1, 1, 1) + b"\x00")
    _, labels_path = write_idx_pair(tmp_path, [0], [0], (1, 1, 1))
    with pytest.raises(FormatError, match="bad"):
        load_idx(images_path, labels_path)


def test_load_idx_count_mismatch(tmp_path):
    images_path, labels_path = write_idx_pair(
        tmp_path, [0] * 9, list(range(10)), (9, 1, 1))
    with pytest.raises(ConsistencyError):
        load_idx(images_path, labels_path)


def test_idx_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    ds = LabeledDataset(images=rng.integers(0, 256, size=(5, 1, 4, 3)) / 255.0,
                        labels=rng.integers(0, 3, size=5), num_classes=3)
    save_idx(ds, tmp_path / "im", tmp_path / "lb")
    back = load_idx(tmp_path / "im", tmp_path / "lb")
    assert np.array_equal(ds.images, back.images)
    assert np.array_equal(ds.labels, back.labels)


def test_image_invariants():
    with pytest.raises(ConsistencyError):
        Image(np.full((1, 2, 2), 1.5))
    img = Image(np.zeros((3, 4, 5)))
    assert (img.channels, img.height, img.width) == (3, 4, 5)


def _write_ppm(path, arr_hwc, maxval=255):
    h, w, c = arr_hwc.shape
    magic = b"P6" if c == 3 else b"P5"
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n%d\n" % (w, h, maxval))
        f.write(arr_hwc.astype(np.uint8).tobytes())


def test_load_pnm_red_pixel(tmp_path):
    arr = np.zeros((1, 1, 3), dtype=np.uint8)
    arr[0, 0] = (255, 0, 0)
    _write_ppm(tmp_path / "red.ppm", arr)
    img = load_pnm(tmp_path / "red.ppm")
    np.testing.assert_array_equal(img.pixels[:, 0, 0], [1.0, 0.0, 0.0])


def test_pnm_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    img = Image(rng.integers(0, 256, size=(3, 6, 5)) / 255.0)
    save_pnm(img, tmp_path / "x.ppm")
    back = load_pnm(tmp_path / "x.ppm")
    np.testing.assert_array_equal(img.pixels, back.pixels)


def test_load_image_dir_manifest(tmp_path):
    rng = np.random.default_rng(2)
    lines = ["resize: none"]
    for i in range(4):
        name = f"img{i}.ppm"
        _write_ppm(tmp_path / name, rng.integers(0, 256, size=(4, 4, 3)))
        lines.append(f"{name}\t{i % 2}")
    manifest = tmp_path / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    ds = load_image_dir(tmp_path, manifest)
    assert len(ds) == 4 and ds.num_classes == 2
    assert ds.images.shape == (4, 3, 4, 4)


def test_load_image_dir_missing_file_names_path(tmp_path):
    manifest = tmp_path / "manifest.txt"
    manifest.write_text("resize: none\nghost.ppm\t0\n")
    with pytest.raises(FormatError, match="ghost.ppm"):
        load_image_dir(tmp_path, manifest)


def test_load_image_dir_shape_mismatch_without_resize(tmp_path):
    rng = np.random.default_rng(3)
    _write_ppm(tmp_path / "a.ppm", rng.integers(0, 256, size=(4, 4, 3)))
    _write_ppm(tmp_path / "b.ppm", rng.integers(0, 256, size=(5, 4, 3)))
    manifest = tmp_path / "m.txt"
    manifest.write_text("resize: none\na.ppm\t0\nb.ppm\t1\n")
    with pytest.raises(ConsistencyError):
        load_image_dir(tmp_path, manifest)


def test_load_image_dir_resize(tmp_path):
    rng = np.random.default_rng(4)
    _write_ppm(tmp_path / "a.ppm", rng.integers(0, 256, size=(8, 6, 3)))
    _write_ppm(tmp_path / "b.ppm", rng.integers(0, 256, size=(4, 4, 3)))
    manifest = tmp_path / "m.txt"
    manifest.write_text("resize: 4x4\na.ppm\t0\nb.ppm\t1\n")
    ds = load_image_dir(tmp_path, manifest)
    assert ds.images.shape == (2, 3, 4, 4)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


def test_stratified_split_90_10():
    labels = np.array([0] * 50 + [1] * 50)
    a, b = stratified_split_indices(labels, (0.9, 0.1), seed=3)
    assert len(a) == 90 and len(b) == 10
    assert (labels[a] == 0).sum() == 45 and (labels[a] == 1).sum() == 45
    assert (labels[b] == 0).sum() == 5 and (labels[b] == 1).sum() == 5


def test_stratified_split_80_10_10():
    labels = np.array([0] * 10 + [1] * 10)
    parts = stratified_split_indices(labels, (0.8, 0.1, 0.1), seed=4)
    assert [len(p) for p in parts] == [16, 2, 2]


def test_stratified_split_deterministic():
    labels = np.random.default_rng(5).integers(0, 4, size=200)
    one = stratified_split_indices(labels, (0.7, 0.3), seed=11)
    two = stratified_split_indices(labels, (0.7, 0.3), seed=11)
    for x, y in zip(one, two):
        assert np.array_equal(x, y)


def test_stratified_split_partitions_fuzzed():
    rng = np.random.default_rng(6)
    for _ in range(30):
        n_classes = int(rng.integers(2, 5))
        labels = rng.integers(0, n_classes, size=int(rng.integers(20, 120)))
        if min(np.bincount(labels, minlength=n_classes)) < 3:
            continue
        parts = stratified_split_indices(labels, (0.6, 0.2, 0.2), seed=int(rng.integers(1000)))
        merged = np.sort(np.concatenate(parts))
        assert np.array_equal(merged, np.arange(len(labels)))


def test_stratified_split_small_class_rejected():
    labels = np.array([0, 0, 0, 1])
    with pytest.raises(StratificationError, match="class 1"):
        stratified_split_indices(labels, (0.5, 0.25, 0.25), seed=0)


def test_stratified_split_dataset_wrapper():
    rng = np.random.default_rng(7)
    ds = LabeledDataset(images=rng.uniform(size=(40, 1, 3, 3)),
                        labels=np.repeat(np.arange(4), 10), num_classes=4)
    tr, va = stratified_split(ds, (0.75, 0.25), seed=9)
    # per class of 10: 7.5/2.5 rounds 8/2 (remainder tie goes to the earlier part)
    assert len(tr) == 32 and len(va) == 8
    assert tr.split_tag == "train" and va.split_tag == "val"
    for cls in range(4):
        assert (va.labels == cls).sum() == 2


def test_stratified_subset_exact_count():
    labels = np.repeat(np.arange(10), 97)
    idx = stratified_subset_indices(labels, 500, seed=1)
    assert len(idx) == 500
    counts = np.bincount(labels[idx], minlength=10)
    assert counts.min() >= 49 and counts.max() <= 51
