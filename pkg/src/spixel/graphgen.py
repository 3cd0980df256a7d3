"""Radius graphs over superpixel centroids, and their on-disk format.

A node is one superpixel; an undirected edge {i, j} exists iff the Euclidean
distance between the two centroids (raw pixel coordinates) is <= radius AND
j is among i's max_neighbors nearest centroids or i among j's (union, then
symmetrized). When radius is None it defaults to the image diagonal, so the
neighbor cap dominates.

Node features: grayscale mode is (mean intensity, row/H, col/W); rgb mode is
(L, a, b of the segment's mean RGB color, rescaled to [0,1], then row/H,
col/W). Features are float32 so that file round-trips are bit-exact.

File format (.spxg, little-endian): magic "SPXG", version u32, graph count
u32; per record: num_nodes u32, feature_dim u32, features f32 row-major,
edge count u32, edge pairs u32 (i < j), label u32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptFileError, EmptyGraphError, FormatError
from .imaging import LabeledDataset
from .slic import SegmentStats, SlicConfig, segment_stats, slic_segment, srgb_to_lab

MAGIC = b"SPXG"
VERSION = 1

GRAYSCALE = "grayscale"
RGB = "rgb"


@dataclass
class GraphConfig:
    radius: float | None = None  # None: image diagonal (cap-dominated)
    max_neighbors: int = 5
    feature_mode: str = GRAYSCALE

    def validate(self) -> None:
        if self.radius is not None and self.radius <= 0:
            raise ConfigError(f"radius must be > 0, got {self.radius}")
        if self.max_neighbors < 1:
            raise ConfigError(f"max_neighbors must be >= 1, got {self.max_neighbors}")
        if self.feature_mode not in (GRAYSCALE, RGB):
            raise ConfigError(f"feature_mode must be '{GRAYSCALE}' or '{RGB}'")


@dataclass
class SuperpixelGraph:
    """Attributed undirected graph: float32 node features, (e, 2) edge pairs i<j."""

    node_features: np.ndarray
    edges: np.ndarray
    label: int
    num_nodes: int

    @property
    def feature_dim(self) -> int:
        return self.node_features.shape[1]


def radius_edges(centroids: np.ndarray, radius: float, max_neighbors: int) -> np.ndarray:
    """Capped radius-graph edge set, as sorted unique (i, j) pairs with i < j.

    A directed pick i->j requires dist(i, j) <= radius and j among the
    max_neighbors nearest of i (distance ties keep the lower node id);
    the undirected edge set is the union of picks in either direction.
    """
    v = len(centroids)
    if v < 2:
        return np.empty((0, 2), dtype=np.int64)
    diff = centroids[:, None, :] - centroids[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    np.fill_diagonal(dist, np.inf)
    within = dist <= radius

    # Order each row by (distance, node id); take the first max_neighbors
    # in-radius entries.
    ids = np.broadcast_to(np.arange(v), (v, v))
    order = np.lexsort((ids, dist), axis=1)
    picked = np.zeros((v, v), dtype=bool)
    cap = min(max_neighbors, v - 1)
    rows = np.repeat(np.arange(v), cap)
    cols = order[:, :cap].ravel()
    picked[rows, cols] = True
    picked &= within

    adjacency = picked | picked.T
    i, j = np.nonzero(np.triu(adjacency, k=1))
    return np.stack([i, j], axis=1).astype(np.int64)


def _node_features(stats: SegmentStats, mode: str) -> np.ndarray:
    h, w = stats.source_shape
    pos = stats.centroids / np.array([h, w], dtype=np.float64)
    if mode == GRAYSCALE:
        if stats.channels != 1:
            raise ConfigError(f"grayscale feature mode on {stats.channels}-channel stats")
        color = stats.mean_colors
    else:
        if stats.channels != 3:
            raise ConfigError(f"rgb feature mode on {stats.channels}-channel stats")
        lab = srgb_to_lab(stats.mean_colors)
        color = np.stack([
            lab[:, 0] / 100.0,
            (lab[:, 1] + 128.0) / 255.0,
            (lab[:, 2] + 128.0) / 255.0,
        ], axis=1)
    return np.concatenate([color, pos], axis=1).astype(np.float32)


def build_radius_graph(stats: SegmentStats, cfg: GraphConfig, label: int) -> SuperpixelGraph:
    """Assemble the attributed radius graph for one segmented image."""
    cfg.validate()
    if len(stats.pixel_counts) == 0:
        raise EmptyGraphError("segmentation produced zero segments")
    h, w = stats.source_shape
    radius = cfg.radius if cfg.radius is not None else float(np.hypot(h, w))
    edges = radius_edges(stats.centroids, radius, cfg.max_neighbors)
    return SuperpixelGraph(
        node_features=_node_features(stats, cfg.feature_mode),
        edges=edges,
        label=int(label),
        num_nodes=len(stats.pixel_counts),
    )


def radius_graph_dataset(ds: LabeledDataset, slic_cfg: SlicConfig,
                         graph_cfg: GraphConfig) -> list[SuperpixelGraph]:
    """One graph per image, order-aligned with the dataset."""
    graphs = []
    for k in range(len(ds)):
        try:
            img = ds.image(k)
            seg = slic_segment(img, slic_cfg)
            stats = segment_stats(seg, img)
            graphs.append(build_radius_graph(stats, graph_cfg, int(ds.labels[k])))
        except Exception as e:
            raise type(e)(f"image {k}: {e}") from e
    return graphs


def save_graphs(graphs, path) -> None:
    """Write a graph sequence to the binary .spxg format."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(graphs)))
        for g in graphs:
            feats = np.ascontiguousarray(g.node_features, dtype="<f4")
            edges = np.ascontiguousarray(g.edges, dtype="<u4")
            f.write(struct.pack("<II", g.num_nodes, g.feature_dim))
            f.write(feats.tobytes())
            f.write(struct.pack("<I", len(edges)))
            f.write(edges.tobytes())
            f.write(struct.pack("<I", g.label))


def load_graphs(path) -> list[SuperpixelGraph]:
    """Read a .spxg file; exact inverse of save_graphs."""
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 12:
        raise CorruptFileError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 12
    graphs = []
    for rec in range(count):
        try:
            num_nodes, feature_dim = struct.unpack_from("<II", data, off)
            off += 8
            n_feat = num_nodes * feature_dim
            feats = np.frombuffer(data, dtype="<f4", count=n_feat, offset=off)
            off += 4 * n_feat
            (n_edges,) = struct.unpack_from("<I", data, off)
            off += 4
            edges = np.frombuffer(data, dtype="<u4", count=2 * n_edges, offset=off)
            off += 8 * n_edges
            (label,) = struct.unpack_from("<I", data, off)
            off += 4
        except (struct.error, ValueError) as e:
            raise CorruptFileError(f"{path}: truncated at record {rec}") from e
        graphs.append(SuperpixelGraph(
            node_features=feats.reshape(num_nodes, feature_dim).copy(),
            edges=edges.reshape(n_edges, 2).astype(np.int64),
            label=int(label),
            num_nodes=int(num_nodes),
        ))
    if off != len(data):
        raise CorruptFileError(f"{path}: {len(data) - off} trailing bytes")
    return graphs
