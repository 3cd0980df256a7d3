from collections import deque

import numpy as np
import pytest

from spixel.errors import ConfigError, ConsistencyError
from spixel.imaging import Image
from spixel.slic import (Segmentation, SlicConfig, segment_stats, slic_segment,
                         srgb_to_lab)


def uniform_image(h=28, w=28, value=0.5):
    return Image(np.full((1, h, w), value))


def bfs_components(labels, seg_id):
    """Pure-python 4-connectivity component count for one segment id."""
    h, w = labels.shape
    todo = {(r, c) for r, c in zip(*np.nonzero(labels == seg_id))}
    components = 0
    while todo:
        components += 1
        queue = deque([todo.pop()])
        while queue:
            r, c = queue.popleft()
            for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if (nr, nc) in todo:
                    todo.discard((nr, nc))
                    queue.append((nr, nc))
    return components


def assert_partition(seg: Segmentation):
    assert seg.labels.min() >= 0
    assert seg.labels.max() == seg.num_segments - 1
    used = np.bincount(seg.labels.ravel(), minlength=seg.num_segments)
    assert (used > 0).all()


def test_uniform_image_four_quadrants():
    img = uniform_image()
    seg = slic_segment(img, SlicConfig(n_superpixels=4))
    assert_partition(seg)
    assert seg.num_segments == 4
    counts = np.bincount(seg.labels.ravel())
    assert (counts == 196).all()
    # 2x2 arrangement: each quadrant is one axis-aligned 14x14 block
    for sid in range(4):
        rows, cols = np.nonzero(seg.labels == sid)
        assert rows.max() - rows.min() == 13 and cols.max() - cols.min() == 13


def test_uniform_image_matches_nearest_center_oracle():
    """Color term vanishes, so every pixel must sit with its nearest centroid."""
    img = uniform_image()
    seg = slic_segment(img, SlicConfig(n_superpixels=4))
    stats = segment_stats(seg, img)
    for r in range(28):
        for c in range(28):
            d = np.hypot(stats.centroids[:, 0] - r, stats.centroids[:, 1] - c)
            best = int(np.flatnonzero(d == d.min())[0])  # ties -> lower id
            assert seg.labels[r, c] == best, (r, c)


def test_seed_step_arithmetic():
    assert np.sqrt(28 * 28 / 75) == pytest.approx(3.2331, abs=1e-4)


def test_produced_count_near_requested():
    rng = np.random.default_rng(0)
    img = Image(np.clip(rng.uniform(0.2, 0.8, size=(1, 28, 28))
                        + 0.2 * rng.standard_normal((1, 28, 28)), 0, 1))
    seg = slic_segment(img, SlicConfig(n_superpixels=75))
    assert_partition(seg)
    assert 75 / 2 <= seg.num_segments <= 2 * 75


def test_black_white_boundary_not_straddled():
    pixels = np.zeros((1, 28, 28))
    pixels[:, :, 14:] = 1.0
    seg = slic_segment(Image(pixels), SlicConfig(n_superpixels=8, compactness=1.0))
    assert_partition(seg)
    for sid in range(seg.num_segments):
        vals = pixels[0][seg.labels == sid]
        assert vals.min() == vals.max(), f"segment {sid} mixes black and white"


def test_connectivity_enforced_bfs_oracle():
    rng = np.random.default_rng(1)
    img = Image(rng.uniform(size=(1, 24, 20)))
    seg = slic_segment(img, SlicConfig(n_superpixels=30, enforce_connectivity=True))
    assert_partition(seg)
    for sid in range(seg.num_segments):
        assert bfs_components(seg.labels, sid) == 1


def test_determinism_bitwise():
    rng = np.random.default_rng(2)
    img = Image(rng.uniform(size=(1, 20, 20)))
    cfg = SlicConfig(n_superpixels=12)
    a = slic_segment(img, cfg)
    b = slic_segment(img, cfg)
    assert np.array_equal(a.labels, b.labels)
    assert a.num_segments == b.num_segments


def test_rgb_path_partitions():
    rng = np.random.default_rng(3)
    img = Image(rng.uniform(size=(3, 16, 16)))
    seg = slic_segment(img, SlicConfig(n_superpixels=9))
    assert_partition(seg)
    assert seg.source_shape == (16, 16)


def test_config_rejects_oversized_n():
    with pytest.raises(ConfigError):
        slic_segment(uniform_image(4, 4), SlicConfig(n_superpixels=17))


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        slic_segment(uniform_image(), SlicConfig(n_superpixels=4, compactness=0))
    with pytest.raises(ConfigError):
        slic_segment(uniform_image(), SlicConfig(n_superpixels=4, max_iters=0))


def test_srgb_to_lab_reference_colors():
    lab = srgb_to_lab(np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]))
    np.testing.assert_allclose(lab[0], [100.0, 0.0, 0.0], atol=0.05)
    np.testing.assert_allclose(lab[1], [0.0, 0.0, 0.0], atol=0.05)
    np.testing.assert_allclose(lab[2], [53.24, 80.09, 67.20], atol=0.1)


def test_segment_stats_single_segment():
    img = Image(np.array([[[0.0, 1.0], [0.0, 1.0]]]))
    seg = Segmentation(labels=np.zeros((2, 2), dtype=np.int64),
                       num_segments=1, source_shape=(2, 2))
    stats = segment_stats(seg, img)
    np.testing.assert_allclose(stats.centroids[0], [0.5, 0.5])
    assert stats.mean_colors[0, 0] == pytest.approx(0.5)
    assert stats.pixel_counts[0] == 4


def test_segment_stats_row_zero_segment():
    img = Image(np.zeros((1, 3, 3)))
    labels = np.array([[0, 0, 0], [1, 1, 1], [1, 1, 1]])
    seg = Segmentation(labels=labels, num_segments=2, source_shape=(3, 3))
    stats = segment_stats(seg, img)
    np.testing.assert_allclose(stats.centroids[0], [0.0, 1.0])


def test_segment_stats_counts_partition_fuzzed():
    rng = np.random.default_rng(4)
    for _ in range(20):
        h, w = int(rng.integers(2, 12)), int(rng.integers(2, 12))
        k = int(rng.integers(1, h * w + 1))
        labels = rng.integers(0, k, size=(h, w))
        # Ensure every id used
        labels.ravel()[rng.permutation(h * w)[:k]] = np.arange(k)
        img = Image(rng.uniform(size=(1, h, w)))
        stats = segment_stats(
            Segmentation(labels=labels, num_segments=k, source_shape=(h, w)), img)
        assert stats.pixel_counts.sum() == h * w


def test_segment_stats_shape_mismatch():
    img = Image(np.zeros((1, 3, 3)))
    seg = Segmentation(labels=np.zeros((2, 2), dtype=np.int64),
                       num_segments=1, source_shape=(2, 2))
    with pytest.raises(ConsistencyError):
        segment_stats(seg, img)
