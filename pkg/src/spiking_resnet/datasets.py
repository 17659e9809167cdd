"""Bit-exact ingestion of MNIST (IDX) and CIFAR (binary) files, plus
deterministic splitting and per-class subsetting.

Loaders are pure: the same files always parse to the same tensors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import BadMagicError, CountMismatchError, TruncatedFileError
from .ops import DTYPE

MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801
CIFAR10_RECORD_BYTES = 1 + 3072
CIFAR100_RECORD_BYTES = 2 + 3072


@dataclass
class StandardizationStats:
    """Per-pixel-per-channel mean/std, tagged with the split they came from."""

    mean: np.ndarray
    std: np.ndarray
    source_split: str


@dataclass
class Dataset:
    """Images as float32 (N, C, H, W), labels as int64 (N,)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    stats: StandardizationStats | None = None

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise CountMismatchError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return self.images.shape[0]


def _read_be32(data: bytes, offset: int, path) -> int:
    if len(data) < offset + 4:
        raise TruncatedFileError(f"{path}: truncated header")
    return struct.unpack(">I", data[offset:offset + 4])[0]


def load_mnist_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Parse an IDX image/label file pair; pixels are scaled to [0, 1]."""
    img_data = Path(images_path).read_bytes()
    magic = _read_be32(img_data, 0, images_path)
    if magic != MNIST_IMAGE_MAGIC:
        raise BadMagicError(
            f"{images_path}: expected image magic 0x{MNIST_IMAGE_MAGIC:08x}, got 0x{magic:08x}"
        )
    count = _read_be32(img_data, 4, images_path)
    rows = _read_be32(img_data, 8, images_path)
    cols = _read_be32(img_data, 12, images_path)
    expected = 16 + count * rows * cols
    if len(img_data) < expected:
        raise TruncatedFileError(
            f"{images_path}: {len(img_data)} bytes, header declares {expected}"
        )
    pixels = np.frombuffer(img_data, dtype=np.uint8, count=count * rows * cols, offset=16)
    images = pixels.reshape(count, 1, rows, cols).astype(DTYPE) / 255.0

    lbl_data = Path(labels_path).read_bytes()
    magic = _read_be32(lbl_data, 0, labels_path)
    if magic != MNIST_LABEL_MAGIC:
        raise BadMagicError(
            f"{labels_path}: expected label magic 0x{MNIST_LABEL_MAGIC:08x}, got 0x{magic:08x}"
        )
    lbl_count = _read_be32(lbl_data, 4, labels_path)
    if len(lbl_data) < 8 + lbl_count:
        raise TruncatedFileError(f"{labels_path}: truncated label payload")
    if lbl_count != count:
        raise CountMismatchError(
            f"{images_path} holds {count} images but {labels_path} holds {lbl_count} labels"
        )
    labels = np.frombuffer(lbl_data, dtype=np.uint8, count=lbl_count, offset=8).astype(np.int64)
    return Dataset(images=images, labels=labels, num_classes=num_classes)


def _load_cifar_records(paths, record_bytes: int, label_offset: int):
    images, labels = [], []
    for path in paths:
        data = Path(path).read_bytes()
        if len(data) == 0 or len(data) % record_bytes != 0:
            raise TruncatedFileError(
                f"{path}: {len(data)} bytes is not a positive multiple of {record_bytes}"
            )
        records = np.frombuffer(data, dtype=np.uint8).reshape(-1, record_bytes)
        labels.append(records[:, label_offset].astype(np.int64))
        pix = records[:, label_offset + 1:].reshape(-1, 3, 32, 32)
        images.append(pix.astype(DTYPE) / 255.0)
    return np.concatenate(images), np.concatenate(labels)


def load_cifar10_bin(paths) -> Dataset:
    """Parse CIFAR-10 binary batches (3073-byte records, channel-major pixels)."""
    images, labels = _load_cifar_records(paths, CIFAR10_RECORD_BYTES, 0)
    return Dataset(images=images, labels=labels, num_classes=10)


def load_cifar100_bin(paths) -> Dataset:
    """CIFAR-100 shares the record logic with a 2-byte (coarse, fine) label
    prefix; the fine label is kept."""
    images, labels = _load_cifar_records(paths, CIFAR100_RECORD_BYTES, 1)
    return Dataset(images=images, labels=labels, num_classes=100)


def split(dataset: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic disjoint train/val split; together they cover the input."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n = len(dataset)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    train = replace(dataset, images=dataset.images[train_idx],
                    labels=dataset.labels[train_idx], split="train")
    val = replace(dataset, images=dataset.images[val_idx],
                  labels=dataset.labels[val_idx], split="val")
    return train, val


def subset_per_class(dataset: Dataset, n_per_class: int) -> Dataset:
    """First n examples of each class, in original order (CI-scale subsetting)."""
    keep = []
    seen = {c: 0 for c in range(dataset.num_classes)}
    for i, y in enumerate(dataset.labels):
        if seen[int(y)] < n_per_class:
            seen[int(y)] += 1
            keep.append(i)
    idx = np.asarray(keep, dtype=np.int64)
    return replace(dataset, images=dataset.images[idx], labels=dataset.labels[idx])
