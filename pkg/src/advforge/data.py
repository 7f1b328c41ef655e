"""Datasets: IDX file reading/writing and a seeded synthetic glyph generator."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_UBYTE = 0x08
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


@dataclass
class LabeledDataset:
    """Images of shape (N, C, H, W) in [0, 255] plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if not (len(self.images) == len(self.labels) == len(self.ids)):
            raise ValueError("images, labels and ids must have equal length")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, index):
        index = np.asarray(index, dtype=np.int64)
        return LabeledDataset(self.images[index], self.labels[index], self.ids[index])


# ---------------------------------------------------------------------------
# IDX

def write_idx(path, array):
    """Write an unsigned-byte IDX tensor. Values must be integers in [0, 255]."""
    array = np.asarray(array)
    if array.size and (array.min() < 0 or array.max() > 255 or np.any(array != np.round(array))):
        raise IdxError("IDX ubyte tensors must hold integers in [0, 255]")
    magic = (IDX_UBYTE << 8) | array.ndim
    header = struct.pack(">I", magic) + struct.pack(">" + "I" * array.ndim, *array.shape)
    Path(path).write_bytes(header + array.astype(np.uint8).tobytes())


def read_idx(path, expect_magic=None):
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if expect_magic is not None and magic != expect_magic:
        raise IdxError(f"{path}: magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    if (magic >> 8) != IDX_UBYTE:
        raise IdxError(f"{path}: unsupported IDX element type 0x{magic >> 8:02x}")
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise IdxError(f"{path}: truncated IDX header")
    shape = struct.unpack(">" + "I" * ndim, raw[4:end])
    count = int(np.prod(shape)) if ndim else 1
    if len(raw) - end != count:
        raise IdxError(f"{path}: payload is {len(raw) - end} bytes, header declares {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=end).reshape(shape)


def load_idx_dataset(images_path, labels_path):
    images = read_idx(images_path)
    if images.ndim == 3:
        images = images[:, None, :, :]
    elif images.ndim != 4:
        raise IdxError(f"{images_path}: expected 3 or 4 dimensions, got {images.ndim}")
    labels = read_idx(labels_path, expect_magic=LABEL_MAGIC)
    return LabeledDataset(images.astype(np.float64), labels.astype(np.int64))


def save_idx_dataset(dataset, images_path, labels_path):
    images = dataset.images
    if images.shape[1] == 1:
        images = images[:, 0]
    write_idx(images_path, images)
    write_idx(labels_path, dataset.labels)


# ---------------------------------------------------------------------------
# Synthetic glyphs

@dataclass(frozen=True)
class SyntheticSpec:
    n_train: int = 6000
    n_test: int = 2000
    size: int = 28
    num_classes: int = 10
    strokes: int = 3
    jitter: float = 2.0
    shift: int = 2
    width: float = 1.2
    noise: float = 20.0
    background: float = 0.0
    seed: int = 0


def _render(segments, widths, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    img = np.zeros(size * size)
    for (p, q), w in zip(segments, widths):
        d = q - p
        t = np.clip(((pts - p) @ d) / max(d @ d, 1e-9), 0.0, 1.0)
        dist2 = np.sum((pts - (p + t[:, None] * d)) ** 2, axis=1)
        img = np.maximum(img, np.exp(-dist2 / (2 * w * w)))
    return img.reshape(size, size)


def _prototypes(spec, rng):
    lo, hi = 0.2 * spec.size, 0.8 * spec.size
    return rng.uniform(lo, hi, size=(spec.num_classes, spec.strokes, 2, 2))


def _sample(proto, spec, rng):
    segs = proto + rng.normal(0.0, spec.jitter, size=proto.shape)
    segs = segs + rng.integers(-spec.shift, spec.shift + 1, size=2)
    widths = spec.width * rng.uniform(0.8, 1.25, size=len(segs))
    ink = (255.0 - spec.background) * rng.uniform(0.7, 1.0)
    img = spec.background + ink * _render(segs, widths, spec.size)
    img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(np.round(img), 0, 255)


def synthetic_dataset(spec=SyntheticSpec()):
    """Deterministic 10-class glyph images; returns ``(train, test)``.

    Each class is a fixed set of random strokes. Samples jitter the stroke
    endpoints, translate the glyph, vary stroke width and brightness, and add
    Gaussian pixel noise. Labels cycle through the classes so every prefix of
    the dataset is close to balanced.
    """
    rng = np.random.default_rng(spec.seed)
    protos = _prototypes(spec, rng)
    n = spec.n_train + spec.n_test
    labels = np.arange(n) % spec.num_classes
    images = np.stack([_sample(protos[c], spec, rng) for c in labels])[:, None]
    train = LabeledDataset(images[: spec.n_train], labels[: spec.n_train])
    test = LabeledDataset(images[spec.n_train:], labels[spec.n_train:])
    return train, test


def blobs(n, seed=0, dim=2, separation=8.0):
    """Two linearly separable Gaussian blobs, for quick sanity checks."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    centers = np.zeros((2, dim))
    centers[0, 0], centers[1, 0] = -separation, separation
    x = centers[labels] + rng.normal(size=(n, dim))
    return LabeledDataset(x, labels)
