"""Dataset loading, normalization, splitting, batching, subsampling.

Supported on-disk formats:

* IDX (big-endian magic-number headers): grayscale image/label file
  pairs, magic 0x00000803 for images and 0x00000801 for labels,
* the 3073-byte-record binary layout used by the standard 32x32 RGB
  classification archives (1 label byte + 3 x 1024 pixel bytes per
  record, planes in R, G, B order).

Pixels are scaled to [0, 1] at load time; channel standardization is a
separate step so its statistics can come from the training split only.
Datasets are immutable after construction; every split/subsample/shuffle
is a pure function of its seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .tensor import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    """A dataset file does not match its declared binary format."""


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray      # [N, C, H, W] float32
    labels: np.ndarray      # [N] int64
    name: str
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(
                f"{self.name}: {len(self.images)} images vs {len(self.labels)} labels")
        if len(self.labels) and self.labels.max() >= self.num_classes:
            raise DataFormatError(f"{self.name}: label exceeds class count")

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class SplitSpec:
    seed: int
    val_fraction: float = 0.2
    subsample: int | None = None


def load_idx(images_path, labels_path, name="idx", num_classes=None) -> Dataset:
    with open(images_path, "rb") as f:
        header = f.read(16)
        if len(header) < 16:
            raise DataFormatError(f"{images_path}: truncated IDX image header")
        magic, n, rows, cols = struct.unpack(">iiii", header)
        if magic != IDX_IMAGES_MAGIC:
            raise DataFormatError(f"{images_path}: bad magic 0x{magic:08x}")
        raw = np.frombuffer(f.read(), dtype=np.uint8)
    if raw.size != n * rows * cols:
        raise DataFormatError(f"{images_path}: expected {n * rows * cols} pixels, "
                              f"got {raw.size}")
    with open(labels_path, "rb") as f:
        header = f.read(8)
        if len(header) < 8:
            raise DataFormatError(f"{labels_path}: truncated IDX label header")
        magic, n_labels = struct.unpack(">ii", header)
        if magic != IDX_LABELS_MAGIC:
            raise DataFormatError(f"{labels_path}: bad magic 0x{magic:08x}")
        labels = np.frombuffer(f.read(), dtype=np.uint8)
    if labels.size != n_labels:
        raise DataFormatError(f"{labels_path}: expected {n_labels} labels, "
                              f"got {labels.size}")
    if n != n_labels:
        raise DataFormatError(f"image count {n} != label count {n_labels}")
    images = (raw.reshape(n, 1, rows, cols).astype(np.float32)) / 255.0
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if n else 0
    return Dataset(images, labels, name, num_classes)


def load_cifar_binary(paths, name="cifar10", num_classes=10) -> Dataset:
    if isinstance(paths, (str, bytes)):
        paths = [paths]
    chunks, label_chunks = [], []
    for path in paths:
        with open(path, "rb") as f:
            raw = np.frombuffer(f.read(), dtype=np.uint8)
        if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES != 0:
            raise DataFormatError(f"{path}: size {raw.size} is not a multiple of "
                                  f"the {CIFAR_RECORD_BYTES}-byte record")
        records = raw.reshape(-1, CIFAR_RECORD_BYTES)
        label_chunks.append(records[:, 0].astype(np.int64))
        chunks.append(records[:, 1:].reshape(-1, 3, 32, 32))
    images = np.concatenate(chunks).astype(np.float32) / 255.0
    labels = np.concatenate(label_chunks)
    return Dataset(images, labels, name, num_classes)


def split(ds: Dataset, spec: SplitSpec):
    """Disjoint (train, val) split by seeded permutation."""
    n = len(ds)
    perm = make_rng(spec.seed, 11).permutation(n)
    n_val = int(round(n * spec.val_fraction))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    return (_take(ds, train_idx, suffix="train"), _take(ds, val_idx, suffix="val"))


def subsample(ds: Dataset, n: int, seed: int) -> Dataset:
    if n > len(ds):
        raise ValueError(f"cannot subsample {n} from {len(ds)} samples")
    idx = make_rng(seed, 12).permutation(len(ds))[:n]
    return _take(ds, idx, suffix=f"sub{n}")


def _take(ds, idx, suffix=""):
    name = f"{ds.name}/{suffix}" if suffix else ds.name
    return Dataset(ds.images[idx], ds.labels[idx], name, ds.num_classes)


def standardize(train: Dataset, *others: Dataset):
    """Channel-standardize using the training split's statistics only."""
    mean = train.images.mean(axis=(0, 2, 3), keepdims=True)
    std = train.images.std(axis=(0, 2, 3), keepdims=True)
    std = np.maximum(std, 1e-6)

    def apply(ds):
        images = ((ds.images - mean) / std).astype(np.float32)
        return replace(ds, images=images)

    out = [apply(train)] + [apply(ds) for ds in others]
    return out[0] if not others else tuple(out)


def batches(ds: Dataset, batch_size: int, shuffle_seed=None):
    """Yield (images, labels) minibatches; the final short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    n = len(ds)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        seq = shuffle_seed if isinstance(shuffle_seed, (tuple, list)) else (shuffle_seed,)
        order = make_rng(*seq).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx]


def synthetic_blobs(n, image_size=8, noise=0.15, seed=0, num_classes=2,
                    name="blobs") -> Dataset:
    """Toy image classification set: one gaussian bump per class.

    Class j renders a fixed-position bright bump plus pixel noise, so
    the task is linearly separable whenever the bump amplitude clearly
    exceeds the noise level.  Useful for fast end-to-end training tests.
    """
    rng = make_rng(seed, 13)
    s = image_size
    centers = [( (j + 1) * s / (num_classes + 1), (j + 1) * s / (num_classes + 1) )
               for j in range(num_classes)]
    yy, xx = np.mgrid[0:s, 0:s]
    labels = rng.integers(0, num_classes, size=n)
    images = np.empty((n, 1, s, s), dtype=np.float32)
    for i, lab in enumerate(labels):
        cy, cx = centers[lab]
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * (s / 8.0) ** 2))
        images[i, 0] = bump + noise * rng.standard_normal((s, s))
    return Dataset(images, labels.astype(np.int64), name, num_classes)
