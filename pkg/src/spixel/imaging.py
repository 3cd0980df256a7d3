"""Image dataset loading, normalization, and stratified splitting.

Pixel storage is planar: an image is a float64 array of shape
(channels, height, width) with intensities in [0, 1]. Two ingestion
formats are supported:

  * IDX — the MNIST/FMNIST distribution format. Big-endian headers,
    magic 0x00000803 for image tensors and 0x00000801 for label vectors,
    uint8 payload scaled by 1/255.
  * Portable pixmaps (P5 grayscale / P6 RGB, binary, 8-bit) listed in a
    plain-text manifest: a header line ``resize: HxW`` or ``resize: none``
    followed by ``path<TAB>class_index`` lines, paths relative to a root
    directory.

PNG/JPEG are deliberately not decoded here; convert externally.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, FormatError, StratificationError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Image:
    """One image: planar float64 pixels of shape (channels, height, width)."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3:
            raise ConsistencyError(
                f"expected planar (channels, height, width) pixels, got shape {self.pixels.shape}"
            )
        if self.channels not in (1, 3):
            raise ConsistencyError(f"channels must be 1 or 3, got {self.channels}")
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < 0.0 or hi > 1.0:
            raise ConsistencyError(f"intensities outside [0,1]: min={lo}, max={hi}")

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


@dataclass
class LabeledDataset:
    """Uniform-shape image stack with integer class labels.

    ``images`` has shape (n, channels, height, width); ``labels`` is an
    int64 vector with values in [0, num_classes).
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split_tag: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ConsistencyError(f"images must be (n, c, h, w), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConsistencyError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise ConsistencyError(
                f"label {int(self.labels.max())} >= num_classes {self.num_classes}"
            )

    def __len__(self) -> int:
        return len(self.labels)

    def image(self, i: int) -> Image:
        return Image(self.images[i])

    def subset(self, indices: np.ndarray, split_tag: str | None = None) -> "LabeledDataset":
        return LabeledDataset(
            images=self.images[indices],
            labels=self.labels[indices],
            num_classes=self.num_classes,
            split_tag=split_tag or self.split_tag,
        )


def _read_be32(f, path: Path) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise FormatError(f"{path}: truncated header")
    return struct.unpack(">I", raw)[0]


def load_idx(images_path, labels_path, split_tag: str = "train") -> LabeledDataset:
    """Load an IDX image/label file pair into a dataset.

    Pixel bytes are scaled by 1/255 into [0, 1]. Raises FormatError on a
    bad magic number and ConsistencyError when image and label counts
    disagree.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)

    with open(images_path, "rb") as f:
        magic = _read_be32(f, images_path)
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(
                f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        count = _read_be32(f, images_path)
        rows = _read_be32(f, images_path)
        cols = _read_be32(f, images_path)
        payload = f.read(count * rows * cols)
        if len(payload) != count * rows * cols:
            raise FormatError(f"{images_path}: expected {count * rows * cols} pixel bytes")
        pixels = np.frombuffer(payload, dtype=np.uint8).reshape(count, 1, rows, cols)

    with open(labels_path, "rb") as f:
        magic = _read_be32(f, labels_path)
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(
                f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        n_labels = _read_be32(f, labels_path)
        raw = f.read(n_labels)
        if len(raw) != n_labels:
            raise FormatError(f"{labels_path}: expected {n_labels} label bytes")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if count != n_labels:
        raise ConsistencyError(
            f"{images_path} has {count} images but {labels_path} has {n_labels} labels"
        )

    num_classes = int(labels.max()) + 1 if n_labels else 0
    return LabeledDataset(
        images=pixels.astype(np.float64) / 255.0,
        labels=labels,
        num_classes=num_classes,
        split_tag=split_tag,
    )


def save_idx(ds: LabeledDataset, images_path, labels_path) -> None:
    """Write a dataset as an IDX pair, quantizing intensities to bytes.

    Only single-channel datasets fit the IDX image layout.
    """
    if ds.images.shape[1] != 1:
        raise ConsistencyError("IDX image files hold single-channel data")
    n, _, h, w = ds.images.shape
    quantized = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        f.write(quantized.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


def _read_pnm_token(f, path: Path) -> bytes:
    """Next whitespace-delimited token, skipping '#' comments."""
    token = b""
    while True:
        ch = f.read(1)
        if not ch:
            if token:
                return token
            raise FormatError(f"{path}: truncated header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def load_pnm(path) -> Image:
    """Decode a binary portable pixmap (P5 grayscale or P6 RGB, 8-bit)."""
    path = Path(path)
    try:
        f = open(path, "rb")
    except OSError as e:
        raise FormatError(f"{path}: {e}") from e
    with f:
        kind = _read_pnm_token(f, path)
        if kind not in (b"P5", b"P6"):
            raise FormatError(f"{path}: not a binary PGM/PPM (magic {kind!r})")
        width = int(_read_pnm_token(f, path))
        height = int(_read_pnm_token(f, path))
        maxval = int(_read_pnm_token(f, path))
        if not 0 < maxval < 256:
            raise FormatError(f"{path}: only 8-bit pixmaps supported (maxval {maxval})")
        channels = 1 if kind == b"P5" else 3
        payload = f.read(width * height * channels)
        if len(payload) != width * height * channels:
            raise FormatError(f"{path}: truncated pixel data")
    interleaved = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    planar = np.transpose(interleaved, (2, 0, 1)).astype(np.float64) / float(maxval)
    return Image(planar)


def save_pnm(img: Image, path) -> None:
    """Write an image as binary P5 (1 channel) or P6 (3 channels)."""
    kind = b"P5" if img.channels == 1 else b"P6"
    quantized = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    interleaved = np.transpose(quantized, (1, 2, 0))
    with open(path, "wb") as f:
        f.write(kind + b"\n%d %d\n255\n" % (img.width, img.height))
        f.write(interleaved.tobytes())


def _resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Center-crop to the target aspect ratio, then bilinear-resample."""
    c, h, w = pixels.shape
    target_ratio = out_w / out_h
    if w / h > target_ratio:  # too wide: crop columns
        new_w = max(1, int(round(h * target_ratio)))
        off = (w - new_w) // 2
        pixels = pixels[:, :, off:off + new_w]
    elif w / h < target_ratio:  # too tall: crop rows
        new_h = max(1, int(round(w / target_ratio)))
        off = (h - new_h) // 2
        pixels = pixels[:, off:off + new_h, :]
    c, h, w = pixels.shape
    if (h, w) == (out_h, out_w):
        return pixels
    rows = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    cols = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    r0 = np.clip(np.floor(rows).astype(int), 0, h - 1)
    c0 = np.clip(np.floor(cols).astype(int), 0, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = np.clip(rows - r0, 0.0, 1.0)[None, :, None]
    fc = np.clip(cols - c0, 0.0, 1.0)[None, None, :]
    top = pixels[:, r0[:, None], c0] * (1 - fc) + pixels[:, r0[:, None], c1] * fc
    bot = pixels[:, r1[:, None], c0] * (1 - fc) + pixels[:, r1[:, None], c1] * fc
    return top * (1 - fr) + bot * fr


def load_image_dir(root, manifest, split_tag: str = "train") -> LabeledDataset:
    """Load pixmaps listed in a manifest into a dataset.

    The manifest's first line declares ``resize: HxW`` or ``resize: none``;
    each following non-empty line is ``relative/path<TAB>class_index``.
    Without a declared resize, all images must already share one shape.
    """
    root, manifest = Path(root), Path(manifest)
    try:
        lines = manifest.read_text().splitlines()
    except OSError as e:
        raise FormatError(f"{manifest}: {e}") from e
    if not lines or not lines[0].strip().lower().startswith("resize:"):
        raise FormatError(f"{manifest}: first line must be 'resize: HxW' or 'resize: none'")
    resize_decl = lines[0].split(":", 1)[1].strip().lower()
    if resize_decl == "none":
        target = None
    else:
        try:
            h_s, w_s = resize_decl.split("x")
            target = (int(h_s), int(w_s))
        except ValueError as e:
            raise FormatError(f"{manifest}: bad resize declaration {resize_decl!r}") from e

    entries = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{manifest}:{ln}: expected 'path<TAB>class_index'")
        entries.append((parts[0], int(parts[1])))
    if not entries:
        raise FormatError(f"{manifest}: no entries")

    stack, labels = [], []
    shape = None
    for rel, cls in entries:
        img = load_pnm(root / rel)
        px = img.pixels
        if target is not None:
            px = _resize_bilinear(px, *target)
        if shape is None:
            shape = px.shape
        elif px.shape != shape:
            raise ConsistencyError(
                f"{rel}: shape {px.shape} != {shape} and no resize declared"
            )
        stack.append(px)
        labels.append(cls)

    labels = np.asarray(labels, dtype=np.int64)
    return LabeledDataset(
        images=np.stack(stack),
        labels=labels,
        num_classes=int(labels.max()) + 1,
        split_tag=split_tag,
    )


def _per_class_quota(n: int, fractions) -> list[int]:
    """Largest-remainder apportionment of n items over the fractions."""
    raw = [n * f for f in fractions]
    counts = [int(np.floor(x)) for x in raw]
    remainders = [x - c for x, c in zip(raw, counts)]
    leftover = n - sum(counts)
    # Ties broken toward the earlier split for determinism.
    order = sorted(range(len(fractions)), key=lambda i: (-remainders[i], i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def stratified_split_indices(labels: np.ndarray, fractions, seed: int) -> list[np.ndarray]:
    """Partition indices preserving per-class proportions within +-1 sample.

    Deterministic for a given seed; the returned index arrays are sorted,
    mutually disjoint, and cover every index exactly once.
    """
    fractions = [float(f) for f in fractions]
    if any(f <= 0 for f in fractions):
        raise StratificationError("fractions must be positive")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise StratificationError(f"fractions sum to {sum(fractions)}, expected 1")
    labels = np.asarray(labels)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    parts: list[list[np.ndarray]] = [[] for _ in fractions]
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < len(fractions):
            raise StratificationError(
                f"class {int(cls)} has {len(idx)} samples, fewer than {len(fractions)} splits"
            )
        idx = rng.permutation(idx)
        counts = _per_class_quota(len(idx), fractions)
        start = 0
        for k, cnt in enumerate(counts):
            parts[k].append(idx[start:start + cnt])
            start += cnt
    return [np.sort(np.concatenate(p)) for p in parts]


_DEFAULT_TAGS = ("train", "val", "test")


def stratified_split(ds: LabeledDataset, fractions, seed: int,
                     tags=None) -> list[LabeledDataset]:
    """Split a dataset into stratified disjoint parts. See stratified_split_indices."""
    index_parts = stratified_split_indices(ds.labels, fractions, seed)
    if tags is None:
        tags = [_DEFAULT_TAGS[k] if k < 3 else f"part{k}" for k in range(len(fractions))]
    return [ds.subset(idx, split_tag=tag) for idx, tag in zip(index_parts, tags)]


def stratified_subset_indices(labels: np.ndarray, count: int, seed: int) -> np.ndarray:
    """Exactly ``count`` indices sampled with per-class proportions preserved."""
    labels = np.asarray(labels)
    n = len(labels)
    if not 0 < count <= n:
        raise StratificationError(f"count {count} outside (0, {n}]")
    if count == n:
        return np.arange(n)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    classes = np.unique(labels)
    class_sizes = [int((labels == c).sum()) for c in classes]
    quotas = _per_class_quota(count, [s / n for s in class_sizes])
    picked = []
    for cls, quota, size in zip(classes, quotas, class_sizes):
        quota = min(quota, size)
        idx = rng.permutation(np.flatnonzero(labels == cls))
        picked.append(idx[:quota])
    out = np.sort(np.concatenate(picked))
    # Rounding may leave a small deficit when a class saturates; top up
    # deterministically from the unused remainder.
    if len(out) < count:
        unused = np.setdiff1d(np.arange(n), out)
        extra = rng.permutation(unused)[:count - len(out)]
        out = np.sort(np.concatenate([out, extra]))
    return out
