"""Datasets: CIFAR-10 binary batches and a synthetic blob generator."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

RECORD_BYTES = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # float32 [N, C, H, W]
    labels: np.ndarray  # int64 [N]
    split: str
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


@dataclass
class DataSplits:
    train: Dataset
    test: Dataset

    @property
    def num_classes(self) -> int:
        return self.train.num_classes

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.train.image_shape


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = images.astype(np.float64)
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def normalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    std = np.where(std > 0, std, 1.0)
    out = (images.astype(np.float64) - mean[None, :, None, None]) / std[None, :, None, None]
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# CIFAR-10


def parse_cifar10_records(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Split a CIFAR-10 binary batch into uint8 images [N,3,32,32] and labels."""
    if len(raw) % RECORD_BYTES:
        n_full = len(raw) // RECORD_BYTES
        raise DataFormatError(
            f"{source}: truncated record at byte offset {n_full * RECORD_BYTES} "
            f"(file size {len(raw)} is not a multiple of {RECORD_BYTES})"
        )
    recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = recs[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        i = int(bad[0])
        raise DataFormatError(f"{source}: label {labels[i]} > 9 in record {i} (byte offset {i * RECORD_BYTES})")
    images = recs[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def read_cifar10_file(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    return parse_cifar10_records(path.read_bytes(), str(path))


def load_cifar10_binary(directory, limit: Optional[int] = None, test_limit: Optional[int] = None) -> DataSplits:
    """Load the standard binary batches found in ``directory``.

    Pixels are scaled to [0, 1] and then normalized per channel with the
    training split's statistics. ``limit`` keeps only the first records of
    the training split (desk-scale runs).
    """
    directory = Path(directory)
    train_files = [directory / f for f in CIFAR_TRAIN_FILES if (directory / f).is_file()]
    if not train_files:
        raise DataFormatError(f"{directory}: no data_batch_*.bin files found")
    test_path = directory / CIFAR_TEST_FILE
    if not test_path.is_file():
        raise DataFormatError(f"{directory}: missing {CIFAR_TEST_FILE}")
    parts = [read_cifar10_file(f) for f in train_files]
    x_train = np.concatenate([p[0] for p in parts])[:limit]
    y_train = np.concatenate([p[1] for p in parts])[:limit]
    x_test, y_test = read_cifar10_file(test_path)
    x_test, y_test = x_test[:test_limit], y_test[:test_limit]

    x_train = x_train.astype(np.float64) / 255.0
    x_test = x_test.astype(np.float64) / 255.0
    mean, std = channel_stats(x_train)
    return DataSplits(
        Dataset(normalize(x_train, mean, std), y_train, "train", 10),
        Dataset(normalize(x_test, mean, std), y_test, "test", 10),
    )


# ---------------------------------------------------------------------------
# synthetic data


def _class_prototypes(num_classes: int, image_shape, rng: np.random.Generator, blobs: int):
    c, h, w = image_shape
    centers = rng.uniform(2, [h - 3, w - 3], size=(num_classes, blobs, 2))
    colors = rng.normal(0, 1, size=(num_classes, blobs, c))
    widths = rng.uniform(1.2, 2.5, size=(num_classes, blobs))
    return centers, colors, widths


def _render(centers, colors, widths, image_shape, jitter, rng) -> np.ndarray:
    c, h, w = image_shape
    n = len(centers)
    yy, xx = np.mgrid[0:h, 0:w]
    shift = rng.uniform(-jitter, jitter, size=(n, 1, 2))
    ctr = centers + shift
    imgs = np.zeros((n, c, h, w))
    for b in range(centers.shape[1]):
        d2 = (yy[None] - ctr[:, b, 0, None, None]) ** 2 + (xx[None] - ctr[:, b, 1, None, None]) ** 2
        blob = np.exp(-d2 / (2 * widths[:, b, None, None] ** 2))
        imgs += colors[:, b, :, None, None] * blob[:, None]
    return imgs


def _synth_raw(num_classes: int, n: int, seed: int, image_shape, noise: float, jitter: float, blobs: int):
    proto_rng = np.random.default_rng([seed, 0])
    sample_rng = np.random.default_rng([seed, 1])
    centers, colors, widths = _class_prototypes(num_classes, image_shape, proto_rng, blobs)
    labels = sample_rng.permutation(np.arange(n) % num_classes)
    amp = sample_rng.uniform(0.7, 1.3, size=(n, 1, 1, 1))
    imgs = _render(centers[labels], colors[labels], widths[labels], image_shape, jitter, sample_rng) * amp
    imgs += sample_rng.normal(0, noise, size=imgs.shape)
    return imgs, labels.astype(np.int64)


def synth_dataset(num_classes: int = 10, n: int = 2000, seed: int = 0, image_shape=(3, 16, 16),
                  noise: float = 1.2, jitter: float = 2.5, blobs: int = 3, split: str = "train") -> Dataset:
    """Class-conditional Gaussian-blob images plus pixel noise.

    Each class owns a few coloured blobs at fixed positions; every sample
    shifts them by up to ``jitter`` pixels, rescales their amplitude and adds
    Gaussian noise. Output is normalized per channel.
    """
    imgs, labels = _synth_raw(num_classes, n, seed, tuple(image_shape), noise, jitter, blobs)
    mean, std = channel_stats(imgs)
    return Dataset(normalize(imgs, mean, std), labels, split, num_classes)


def synth_splits(num_classes: int = 10, n_train: int = 2000, n_test: int = 500, seed: int = 0,
                 image_shape=(3, 16, 16), noise: float = 1.2, jitter: float = 2.5, blobs: int = 3) -> DataSplits:
    """Disjoint train/test splits drawn from one set of class prototypes."""
    imgs, labels = _synth_raw(num_classes, n_train + n_test, seed, tuple(image_shape), noise, jitter, blobs)
    mean, std = channel_stats(imgs[:n_train])
    return DataSplits(
        Dataset(normalize(imgs[:n_train], mean, std), labels[:n_train], "train", num_classes),
        Dataset(normalize(imgs[n_train:], mean, std), labels[n_train:], "test", num_classes),
    )
