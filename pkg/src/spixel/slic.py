"""SLIC superpixel segmentation.

k-means-style clustering in a joint color+spatial space. Seeds start on a
regular grid of step S = sqrt(H*W / n), each perturbed to the lowest-gradient
pixel of its 3x3 neighborhood. Assignment is restricted to a 2S x 2S window
around each cluster center under the distance

    D = sqrt(d_color^2 + (d_spatial * m / S)^2)

with centers updated to cluster means until the largest center movement (in
the same combined units) drops below 1e-3 or an iteration cap is reached.

Grayscale images cluster on raw [0,1] intensity; RGB images cluster in
CIELAB (sRGB, D65). The compactness weight m is expressed on the CIELAB
scale where 10 is the customary default; for unit-range grayscale it is
rescaled by 1/100 internally, which is the equivalent parameterization.

With connectivity enforcement on, connected fragments smaller than S^2/4
are relabeled to the adjacent segment sharing the longest boundary, and the
final label of every segment is a single 4-connected component.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ConsistencyError
from .imaging import Image

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass
class SlicConfig:
    n_superpixels: int
    compactness: float = 10.0
    max_iters: int = 10
    enforce_connectivity: bool = True

    def validate(self, pixel_count: int) -> None:
        if not 1 <= self.n_superpixels <= pixel_count:
            raise ConfigError(
                f"n_superpixels {self.n_superpixels} outside [1, {pixel_count}]"
            )
        if self.compactness <= 0:
            raise ConfigError(f"compactness must be > 0, got {self.compactness}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")


@dataclass
class Segmentation:
    """Per-pixel superpixel ids, row-major, in [0, num_segments)."""

    labels: np.ndarray
    num_segments: int
    source_shape: tuple[int, int]


def srgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB in [0,1] (..., 3) to CIELAB (D65 white point)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    linear = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    m = np.array([
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ])
    xyz = linear @ m.T
    white = np.array([0.95047, 1.0, 1.08883])
    t = xyz / white
    f = np.where(t > (6 / 29) ** 3, np.cbrt(t), t / (3 * (6 / 29) ** 2) + 4 / 29)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def _cluster_space(img: Image) -> tuple[np.ndarray, float]:
    """(H, W, F) color features for clustering and the effective compactness scale."""
    if img.channels == 1:
        return img.pixels[0][..., None], 1.0 / 100.0
    rgb = np.transpose(img.pixels, (1, 2, 0))
    return srgb_to_lab(rgb), 1.0


def _seed_grid(h: int, w: int, step: float) -> np.ndarray:
    rows = np.arange(step / 2.0, h, step)
    cols = np.arange(step / 2.0, w, step)
    if len(rows) == 0:  # elongated image: step exceeds one dimension
        rows = np.array([(h - 1) / 2.0])
    if len(cols) == 0:
        cols = np.array([(w - 1) / 2.0])
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


def _perturb_seeds(seeds: np.ndarray, color: np.ndarray) -> np.ndarray:
    """Move each seed to the lowest-gradient pixel in its 3x3 neighborhood."""
    h, w = color.shape[:2]
    padded = np.pad(color, ((1, 1), (1, 1), (0, 0)), mode="edge")
    dy = padded[2:, 1:-1] - padded[:-2, 1:-1]
    dx = padded[1:-1, 2:] - padded[1:-1, :-2]
    grad = (dy ** 2).sum(-1) + (dx ** 2).sum(-1)
    out = np.empty((len(seeds), 2), dtype=np.int64)
    for k, (r, c) in enumerate(seeds):
        r, c = int(round(r)), int(round(c))
        r = min(max(r, 0), h - 1)
        c = min(max(c, 0), w - 1)
        r0, r1 = max(r - 1, 0), min(r + 2, h)
        c0, c1 = max(c - 1, 0), min(c + 2, w)
        window = grad[r0:r1, c0:c1]
        flat = int(np.argmin(window))  # first minimum in scan order
        out[k] = (r0 + flat // window.shape[1], c0 + flat % window.shape[1])
    return out


_DENSE_ASSIGN_LIMIT = 4_000_000  # clusters x pixels above this: windowed loop


def _assign_dense(color, centers_pos, centers_color, step, m_eff):
    """All-clusters-at-once assignment; identical math to the windowed loop."""
    h, w = color.shape[:2]
    k = len(centers_pos)
    spatial_w = (m_eff / step) ** 2
    rows = np.arange(h, dtype=np.float64)
    cols = np.arange(w, dtype=np.float64)
    dr = rows[None, :] - centers_pos[:, 0][:, None]   # (k, h)
    dc = cols[None, :] - centers_pos[:, 1][:, None]   # (k, w)
    d2 = spatial_w * (dr[:, :, None] ** 2 + dc[:, None, :] ** 2)
    for f in range(color.shape[2]):
        d2 += (color[None, :, :, f] - centers_color[:, f][:, None, None]) ** 2
    # Restrict each cluster to its 2S x 2S window, matching the loop's bounds.
    in_rows = (rows[None, :] >= np.floor(centers_pos[:, 0] - step)[:, None]) & \
              (rows[None, :] <= np.ceil(centers_pos[:, 0] + step)[:, None])
    in_cols = (cols[None, :] >= np.floor(centers_pos[:, 1] - step)[:, None]) & \
              (cols[None, :] <= np.ceil(centers_pos[:, 1] + step)[:, None])
    d2[~(in_rows[:, :, None] & in_cols[:, None, :])] = np.inf
    labels = np.argmin(d2, axis=0)  # ties -> lower cluster id
    best = np.take_along_axis(d2, labels[None], axis=0)[0]
    labels = labels.astype(np.int64)
    labels[~np.isfinite(best)] = -1
    return labels, best


def _assign_windowed(color, centers_pos, centers_color, step, m_eff):
    """Per-cluster windowed assignment. Ties keep the lower cluster id."""
    h, w = color.shape[:2]
    best = np.full((h, w), np.inf)
    labels = np.full((h, w), -1, dtype=np.int64)
    spatial_w = (m_eff / step) ** 2
    row_grid = np.arange(h, dtype=np.float64)
    col_grid = np.arange(w, dtype=np.float64)
    for k in range(len(centers_pos)):
        cr, cc = centers_pos[k]
        r0, r1 = max(int(np.floor(cr - step)), 0), min(int(np.ceil(cr + step)) + 1, h)
        c0, c1 = max(int(np.floor(cc - step)), 0), min(int(np.ceil(cc + step)) + 1, w)
        if r0 >= r1 or c0 >= c1:
            continue
        dc = color[r0:r1, c0:c1] - centers_color[k]
        d2 = (dc ** 2).sum(-1)
        dr = row_grid[r0:r1, None] - cr
        dcl = col_grid[None, c0:c1] - cc
        d2 = d2 + spatial_w * (dr ** 2 + dcl ** 2)
        window_best = best[r0:r1, c0:c1]
        mask = d2 < window_best
        window_best[mask] = d2[mask]
        labels[r0:r1, c0:c1][mask] = k
    return labels, best


def _assign(color, centers_pos, centers_color, step, m_eff):
    h, w = color.shape[:2]
    if len(centers_pos) * h * w <= _DENSE_ASSIGN_LIMIT:
        return _assign_dense(color, centers_pos, centers_color, step, m_eff)
    return _assign_windowed(color, centers_pos, centers_color, step, m_eff)


def _assign_orphans(labels, best, color, centers_pos, centers_color, step, m_eff):
    """Full-image fallback for pixels no window covered (post-update drift)."""
    orphan = labels < 0
    if not orphan.any():
        return
    rows, cols = np.nonzero(orphan)
    spatial_w = (m_eff / step) ** 2
    pix_color = color[rows, cols]
    d2 = ((pix_color[:, None, :] - centers_color[None, :, :]) ** 2).sum(-1)
    d2 += spatial_w * (
        (rows[:, None] - centers_pos[None, :, 0]) ** 2
        + (cols[:, None] - centers_pos[None, :, 1]) ** 2
    )
    labels[rows, cols] = np.argmin(d2, axis=1)
    best[rows, cols] = d2[np.arange(len(rows)), labels[rows, cols]]


def _relabel_consecutive(labels: np.ndarray) -> tuple[np.ndarray, int]:
    """Map used ids to 0..k-1 in first-occurrence scan order."""
    flat = labels.ravel()
    used, first_pos = np.unique(flat, return_index=True)
    order = used[np.argsort(first_pos)]
    remap = np.empty(int(used.max()) + 1, dtype=np.int64)
    remap[order] = np.arange(len(order))
    return remap[flat].reshape(labels.shape), len(order)


def _enforce_connectivity(labels: np.ndarray, min_size: int) -> np.ndarray:
    """Split disconnected segments; merge small fragments into the dominant neighbor.

    Components at or above min_size each become their own segment. Smaller
    components are relabeled to the adjacent final segment with which they
    share the longest boundary (ties toward the lower id). Resolution works
    on the component adjacency graph, so cost is O(pixels + components).
    """
    comp_id = np.full(labels.shape, -1, dtype=np.int64)
    n_comps = 0
    for seg in np.unique(labels):
        sub, n = ndimage.label(labels == seg, structure=_FOUR_CONN)
        found = sub > 0
        comp_id[found] = sub[found] - 1 + n_comps
        n_comps += n

    flat = comp_id.ravel()
    sizes = np.bincount(flat, minlength=n_comps)
    _, first_pos = np.unique(flat, return_index=True)  # comps sorted by id

    # Boundary-length counts between adjacent components.
    pairs = []
    for a, b in ((comp_id[:, :-1], comp_id[:, 1:]), (comp_id[:-1, :], comp_id[1:, :])):
        a, b = a.ravel(), b.ravel()
        diff = a != b
        lo = np.minimum(a[diff], b[diff])
        hi = np.maximum(a[diff], b[diff])
        pairs.append(lo * n_comps + hi)
    enc, counts = np.unique(np.concatenate(pairs) if pairs else [], return_counts=True)
    neighbors: list[list[tuple[int, int]]] = [[] for _ in range(n_comps)]
    for code, cnt in zip(enc, counts):
        lo, hi = divmod(int(code), n_comps)
        neighbors[lo].append((hi, int(cnt)))
        neighbors[hi].append((lo, int(cnt)))

    scan_order = np.argsort(first_pos, kind="stable")
    kept = [int(c) for c in scan_order if sizes[c] >= min_size]
    if not kept:  # degenerate: everything is a fragment, keep the largest
        kept = [int(scan_order[np.argmax(sizes[scan_order])])]
    final = np.full(n_comps, -1, dtype=np.int64)
    for new_id, comp in enumerate(kept):
        final[comp] = new_id

    pending = [int(c) for c in scan_order if final[c] < 0]
    while pending:
        deferred = []
        progressed = False
        for comp in pending:
            weights = np.zeros(len(kept))
            seen = False
            for nbr, cnt in neighbors[comp]:
                if final[nbr] >= 0:
                    weights[final[nbr]] += cnt
                    seen = True
            if not seen:
                deferred.append(comp)
                continue
            final[comp] = int(np.argmax(weights))  # argmax ties -> lower id
            progressed = True
        if not progressed:
            raise ConsistencyError("connectivity enforcement failed to converge")
        pending = deferred
    return final[comp_id]


def slic_segment(img: Image, cfg: SlicConfig) -> Segmentation:
    """Segment an image into approximately cfg.n_superpixels superpixels.

    Deterministic: identical (img, cfg) yields an identical label map.
    """
    h, w = img.height, img.width
    cfg.validate(h * w)
    color, m_scale = _cluster_space(img)
    m_eff = cfg.compactness * m_scale
    step = float(np.sqrt(h * w / cfg.n_superpixels))

    seeds = _perturb_seeds(_seed_grid(h, w, step), color)
    centers_pos = seeds.astype(np.float64)
    centers_color = color[seeds[:, 0], seeds[:, 1]].astype(np.float64)

    labels = None
    for _ in range(cfg.max_iters):
        labels, best = _assign(color, centers_pos, centers_color, step, m_eff)
        _assign_orphans(labels, best, color, centers_pos, centers_color, step, m_eff)

        flat = labels.ravel()
        k = len(centers_pos)
        counts = np.bincount(flat, minlength=k).astype(np.float64)
        sum_r = np.bincount(flat, weights=np.repeat(np.arange(h), w), minlength=k)
        sum_c = np.bincount(flat, weights=np.tile(np.arange(w), h), minlength=k)
        new_pos = centers_pos.copy()
        new_color = centers_color.copy()
        nonempty = counts > 0
        new_pos[nonempty, 0] = sum_r[nonempty] / counts[nonempty]
        new_pos[nonempty, 1] = sum_c[nonempty] / counts[nonempty]
        for f in range(color.shape[2]):
            sum_f = np.bincount(flat, weights=color[..., f].ravel(), minlength=k)
            new_color[nonempty, f] = sum_f[nonempty] / counts[nonempty]

        move2 = ((new_color - centers_color) ** 2).sum(-1)
        move2 += (m_eff / step) ** 2 * ((new_pos - centers_pos) ** 2).sum(-1)
        centers_pos, centers_color = new_pos, new_color
        if float(np.sqrt(move2.max())) < 1e-3:
            break

    if cfg.enforce_connectivity:
        min_size = max(1, int(step * step / 4.0))
        labels = _enforce_connectivity(labels, min_size)
    labels, num_segments = _relabel_consecutive(labels)
    return Segmentation(labels=labels.astype(np.int64), num_segments=num_segments,
                        source_shape=(h, w))


@dataclass
class SegmentStats:
    """Per-segment centroids (row, col), per-channel mean colors, and sizes."""

    centroids: np.ndarray    # (k, 2) float64
    mean_colors: np.ndarray  # (k, channels) float64
    pixel_counts: np.ndarray  # (k,) int64
    source_shape: tuple[int, int]
    channels: int


def segment_stats(seg: Segmentation, img: Image) -> SegmentStats:
    """Centroid, mean color, and pixel count for every segment."""
    h, w = seg.source_shape
    if (img.height, img.width) != (h, w):
        raise ConsistencyError(
            f"segmentation shape {(h, w)} != image shape {(img.height, img.width)}"
        )
    flat = seg.labels.ravel()
    k = seg.num_segments
    counts = np.bincount(flat, minlength=k)
    if (counts == 0).any():
        raise ConsistencyError("segmentation has unused label ids")
    centroids = np.stack([
        np.bincount(flat, weights=np.repeat(np.arange(h), w), minlength=k) / counts,
        np.bincount(flat, weights=np.tile(np.arange(w), h), minlength=k) / counts,
    ], axis=1)
    mean_colors = np.stack([
        np.bincount(flat, weights=img.pixels[c].ravel(), minlength=k) / counts
        for c in range(img.channels)
    ], axis=1)
    return SegmentStats(
        centroids=centroids,
        mean_colors=mean_colors,
        pixel_counts=counts.astype(np.int64),
        source_shape=(h, w),
        channels=img.channels,
    )
