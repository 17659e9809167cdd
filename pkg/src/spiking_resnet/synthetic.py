"""Synthetic stand-in datasets written in the genuine on-disk formats.

Each class is a smooth random template; samples are cyclic shifts of the
template with contrast jitter and pixel noise. The files round-trip through
the real IDX / CIFAR-binary loaders, so the full pipeline can run on
machines without the original datasets.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np


def _smooth_templates(rng: np.random.Generator, num_classes: int, channels: int,
                      size: int, cell: int) -> np.ndarray:
    """Low-resolution random fields upsampled and box-blurred, in [0, 1]."""
    low = size // cell
    fields = rng.uniform(0.0, 1.0, size=(num_classes, channels, low, low))
    up = np.kron(fields, np.ones((cell, cell)))
    for _ in range(2):
        blurred = up.copy()
        for shift in (-1, 1):
            blurred += np.roll(up, shift, axis=2) + np.roll(up, shift, axis=3)
        up = blurred / 5.0
    up -= up.min(axis=(2, 3), keepdims=True)
    peak = up.max(axis=(2, 3), keepdims=True)
    peak[peak == 0] = 1.0
    return up / peak


def _render(rng: np.random.Generator, templates: np.ndarray, labels: np.ndarray,
            max_shift: int, noise: float) -> np.ndarray:
    """Shifted, jittered, noisy uint8 samples for the given label sequence."""
    n = labels.shape[0]
    _, c, h, w = templates.shape
    out = np.empty((n, c, h, w), dtype=np.uint8)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    contrast = rng.uniform(0.75, 1.25, size=n)
    for i in range(n):
        img = np.roll(templates[labels[i]], tuple(shifts[i]), axis=(1, 2))
        img = img * contrast[i] + rng.normal(0.0, noise, size=img.shape)
        out[i] = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return out


def _write_idx_images(path, images: np.ndarray) -> None:
    n, _, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        f.write(images.tobytes())


def _write_idx_labels(path, labels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())


def write_mnist_like(root, n_train: int = 12000, n_test: int = 2000, seed: int = 0,
                     noise: float = 0.12, max_shift: int = 4) -> dict:
    """Write an MNIST-format dataset (1x28x28, 10 classes) under `root`."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    templates = _smooth_templates(rng, num_classes=10, channels=1, size=28, cell=4)
    files = {}
    for tag, count in (("train", n_train), ("t10k", n_test)):
        labels = rng.integers(0, 10, size=count).astype(np.uint8)
        images = _render(rng, templates, labels, max_shift, noise)
        img_path = root / f"{tag}-images-idx3-ubyte"
        lbl_path = root / f"{tag}-labels-idx1-ubyte"
        _write_idx_images(img_path, images)
        _write_idx_labels(lbl_path, labels)
        files[tag] = (str(img_path), str(lbl_path))
    return files


def write_cifar10_like(root, n_train: int = 12000, n_test: int = 2000, seed: int = 0,
                       noise: float = 0.18, max_shift: int = 6) -> dict:
    """Write a CIFAR-10-binary-format dataset (3x32x32, 10 classes) under `root`."""
    root = Path(root) / "cifar-10-batches-bin"
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    templates = _smooth_templates(rng, num_classes=10, channels=3, size=32, cell=4)

    def write_batch(path, count):
        labels = rng.integers(0, 10, size=count).astype(np.uint8)
        images = _render(rng, templates, labels, max_shift, noise)
        records = np.concatenate(
            [labels[:, None], images.reshape(count, -1)], axis=1
        ).astype(np.uint8)
        Path(path).write_bytes(records.tobytes())
        return str(path)

    files = {"train": [], "test": []}
    per_batch = max(1, n_train // 2)
    remaining = n_train
    for i in range(1, 3):
        count = per_batch if i < 2 else remaining
        files["train"].append(write_batch(root / f"data_batch_{i}.bin", count))
        remaining -= count
    files["test"].append(write_batch(root / "test_batch.bin", n_test))
    return files
