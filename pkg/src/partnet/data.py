"""Dataset generation, IDX ingestion, rotation variants, chunk splitting."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import hyper
from .partition import largest_remainder


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxExtentError(IdxError):
    pass


IDX_MAGIC_LABELS = 0x00000801
IDX_MAGIC_IMAGES = 0x00000803
_MAX_ELEMENTS = 1 << 40  # refuse absurd headers before allocating


@dataclass
class TabularDataset:
    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,)

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"row count mismatch: {self.features.shape[0]} features vs "
                f"{self.labels.shape[0]} labels")

    def __len__(self):
        return self.labels.shape[0]


@dataclass
class ImageDataset:
    images: np.ndarray  # (n, H, W) in [0, 1]
    labels: np.ndarray  # (n,)
    angles: np.ndarray | None = None  # radians, present iff rotated variant

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"row count mismatch: {self.images.shape[0]} images vs "
                f"{self.labels.shape[0]} labels")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def flat_features(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)


# ---------------------------------------------------------------------------
# generators

def box_muller(rng, shape) -> np.ndarray:
    """Standard-normal draws via plain Box-Muller (portable, ziggurat-free)."""
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    else:
        shape = tuple(int(s) for s in shape)
    count = int(np.prod(shape)) if shape else 1
    pairs = (count + 1) // 2
    u1 = 1.0 - rng.random(pairs)  # (0, 1]: keeps the log finite
    u2 = rng.random(pairs)
    radius = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([radius * np.cos(2.0 * np.pi * u2),
                        radius * np.sin(2.0 * np.pi * u2)])
    return z[:count].reshape(shape)


def gen_input_selection(n: int, rng, n_informative: int = 15,
                        n_features: int = 30) -> TabularDataset:
    """Binary-label task where only the first features carry signal:
    y ~ Bern(1/2), x_i = y + eps_i for informative i, x_i = eps_i otherwise,
    eps iid standard normal."""
    if n < 1:
        raise ValueError(f"need at least 1 example, got {n}")
    labels = (rng.random(n) < 0.5).astype(np.int64)
    x = box_muller(rng, (n, n_features))
    x[:, :n_informative] += labels[:, None]
    return TabularDataset(x, labels)


GLYPH_CLASSES = ("disk", "ring", "cross", "bar")


def _glyph_image(kind: str, size: int, cx: float, cy: float, scale: float) -> np.ndarray:
    """Antialiased glyph via a signed distance field, values in [0, 1]."""
    ax = np.arange(size, dtype=np.float64)
    xx, yy = np.meshgrid(ax - cx, ax - cy)
    r = np.hypot(xx, yy)
    half = 0.5 * (size - 1) * scale
    if kind == "disk":
        d = r - 0.58 * half
    elif kind == "ring":
        d = np.abs(r - 0.58 * half) - 0.18 * half
    elif kind == "cross":
        w, arm = 0.16 * half, 0.85 * half
        horiz = np.maximum(np.abs(yy) - w, np.abs(xx) - arm)
        vert = np.maximum(np.abs(xx) - w, np.abs(yy) - arm)
        d = np.minimum(horiz, vert)
    elif kind == "bar":
        w, arm = 0.16 * half, 0.85 * half
        d = np.maximum(np.abs(xx) - w, np.abs(yy) - arm)
    else:
        raise ValueError(f"unknown glyph kind {kind!r}")
    return np.clip(0.5 - d, 0.0, 1.0)


def gen_glyphs(n: int, rng, size: int = 16, noise: float = 0.08) -> ImageDataset:
    """Synthetic shape-classification images (disk/ring/cross/bar).

    Classes stay mutually distinguishable under arbitrary rotation, so the
    rotated variant (see :func:`rotate_fixed`) is fully rotation invariant in
    its generative process.
    """
    if n < 1:
        raise ValueError(f"need at least 1 example, got {n}")
    labels = rng.integers(0, len(GLYPH_CLASSES), size=n)
    center = 0.5 * (size - 1)
    images = np.empty((n, size, size), dtype=np.float64)
    for i, lab in enumerate(labels):
        cx = center + rng.uniform(-1.0, 1.0)
        cy = center + rng.uniform(-1.0, 1.0)
        s = rng.uniform(0.8, 1.15)
        images[i] = _glyph_image(GLYPH_CLASSES[lab], size, cx, cy, s)
    images += noise * box_muller(rng, images.shape)
    np.clip(images, 0.0, 1.0, out=images)
    return ImageDataset(images, labels.astype(np.int64))


def rotate_fixed(dataset: ImageDataset, rng) -> ImageDataset:
    """Rotate every image once by an angle drawn uniformly from [-pi, pi];
    the angles are stored and stay fixed for the run."""
    n = len(dataset)
    angles = rng.uniform(-np.pi, np.pi, size=n)
    mats = np.stack([hyper.rotation_matrix(a) for a in angles])
    rotated = hyper.bilinear_warp(dataset.images, mats)
    return ImageDataset(np.clip(rotated, 0.0, 1.0), dataset.labels.copy(), angles)


# ---------------------------------------------------------------------------
# IDX binary format

@dataclass
class IdxFile:
    magic: int
    extents: tuple
    payload: bytes


def parse_idx(blob: bytes) -> IdxFile:
    """Decode one big-endian IDX file (u8 payloads only)."""
    if len(blob) < 4:
        raise IdxTruncatedError(f"header needs 4 bytes, file has {len(blob)}")
    (magic,) = struct.unpack_from(">I", blob, 0)
    if magic == IDX_MAGIC_LABELS:
        ndim = 1
    elif magic == IDX_MAGIC_IMAGES:
        ndim = 3
    else:
        raise IdxMagicError(f"unsupported magic 0x{magic:08x}")
    need = 4 + 4 * ndim
    if len(blob) < need:
        raise IdxTruncatedError(f"extent header needs {need} bytes, file has {len(blob)}")
    extents = struct.unpack_from(f">{ndim}I", blob, 4)
    count = 1
    for e in extents:
        count *= e
    if count > _MAX_ELEMENTS:
        raise IdxExtentError(f"extents {extents} overflow ({count} elements)")
    payload = blob[need:]
    if len(payload) != count:
        raise IdxTruncatedError(
            f"payload has {len(payload)} bytes, extents {extents} require {count}")
    return IdxFile(magic, tuple(int(e) for e in extents), payload)


def serialize_idx(idx: IdxFile) -> bytes:
    ndim = {IDX_MAGIC_LABELS: 1, IDX_MAGIC_IMAGES: 3}.get(idx.magic)
    if ndim is None:
        raise IdxMagicError(f"unsupported magic 0x{idx.magic:08x}")
    if len(idx.extents) != ndim:
        raise IdxExtentError(f"magic 0x{idx.magic:08x} requires {ndim} extents, "
                             f"got {len(idx.extents)}")
    head = struct.pack(">I", idx.magic) + struct.pack(f">{ndim}I", *idx.extents)
    return head + bytes(idx.payload)


def idx_to_images(idx: IdxFile) -> np.ndarray:
    """(n, H, W) float images scaled to [0, 1] by /255."""
    if idx.magic != IDX_MAGIC_IMAGES:
        raise IdxMagicError(f"expected image magic, got 0x{idx.magic:08x}")
    arr = np.frombuffer(idx.payload, dtype=np.uint8).reshape(idx.extents)
    return arr.astype(np.float64) / 255.0


def idx_to_labels(idx: IdxFile) -> np.ndarray:
    if idx.magic != IDX_MAGIC_LABELS:
        raise IdxMagicError(f"expected label magic, got 0x{idx.magic:08x}")
    return np.frombuffer(idx.payload, dtype=np.uint8).astype(np.int64)


def images_to_idx(images: np.ndarray) -> IdxFile:
    arr = np.asarray(images)
    if arr.ndim != 3:
        raise IdxExtentError(f"images must be (n, H, W), got shape {arr.shape}")
    payload = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8).tobytes()
    return IdxFile(IDX_MAGIC_IMAGES, arr.shape, payload)


def labels_to_idx(labels: np.ndarray) -> IdxFile:
    arr = np.asarray(labels)
    return IdxFile(IDX_MAGIC_LABELS, (arr.size,), arr.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# chunk splitting

@dataclass
class ChunkedDataset:
    """Training data split into C ordered chunks; order is fixed for a run.

    Features and labels are stored concatenated in chunk order with offsets,
    so prefixes D_{1:k} are contiguous views.  Features may be tabular
    (n, d) or images (n, H, W); slicing is always along axis 0.
    """

    features: np.ndarray
    labels: np.ndarray
    offsets: np.ndarray  # C+1 cumulative boundaries, offsets[0] == 0

    def __post_init__(self):
        if self.offsets[0] != 0 or self.offsets[-1] != len(self.labels):
            raise ValueError("offsets must start at 0 and end at the dataset size")
        if np.any(np.diff(self.offsets) <= 0):
            raise ValueError("every chunk must be nonempty")

    @property
    def n_chunks(self) -> int:
        return len(self.offsets) - 1

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def chunk(self, k: int):
        """Features/labels of chunk k (1-based)."""
        lo, hi = self.offsets[k - 1], self.offsets[k]
        return self.features[lo:hi], self.labels[lo:hi]

    def prefix(self, k: int):
        """Features/labels of the union D_{1:k}."""
        hi = self.offsets[k]
        return self.features[:hi], self.labels[:hi]

    def prefix_size(self, k: int) -> int:
        return int(self.offsets[k])


def chunk_split(features: np.ndarray, labels: np.ndarray, chunk_ratios, rng=None,
                shuffle: bool = True) -> ChunkedDataset:
    """Split rows into chunks sized by largest remainder, preserving ratio order."""
    n = len(labels)
    sizes = largest_remainder(n, chunk_ratios)
    if np.any(sizes == 0):
        raise ValueError(f"chunk ratios {list(chunk_ratios)} leave an empty chunk "
                         f"for {n} examples (sizes {sizes.tolist()})")
    if shuffle:
        if rng is None:
            raise ValueError("shuffle requires an rng")
        order = rng.permutation(n)
        features = features[order]
        labels = labels[order]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    return ChunkedDataset(features, labels, offsets)
