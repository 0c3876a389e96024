"""Synthetic classification sets, an IDX reader/writer, and seeded minibatching."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

TRAIN, VAL = 0, 1

IDX_IMAGES_MAGIC = 0x00000803  # unsigned byte, 3 dims
IDX_LABELS_MAGIC = 0x00000801  # unsigned byte, 1 dim


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int
    split: np.ndarray  # TRAIN / VAL tag per sample

    def __len__(self):
        return len(self.labels)

    def subset(self, tag: int) -> "Dataset":
        keep = self.split == tag
        return Dataset(self.inputs[keep], self.labels[keep], self.class_count, self.split[keep])

    @property
    def train(self) -> "Dataset":
        return self.subset(TRAIN)

    @property
    def val(self) -> "Dataset":
        return self.subset(VAL)

    def batch(self, index) -> Batch:
        return Batch(self.inputs[index], self.labels[index])


def _split_tags(n: int, val_fraction: float, rng) -> np.ndarray:
    split = np.full(n, TRAIN, dtype=np.int8)
    n_val = int(round(n * val_fraction))
    split[rng.permutation(n)[:n_val]] = VAL
    return split


def normalize(inputs: np.ndarray, split: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance per feature using train-split statistics only."""
    train = inputs[split == TRAIN]
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return ((inputs - mean) / std).astype(np.float32)


def _balanced_labels(classes: int, n: int) -> np.ndarray:
    return np.arange(n) % classes


def _check_sizes(classes, n, noise):
    if classes < 1 or n < classes:
        raise ValueError(f"need n >= classes >= 1, got n={n}, classes={classes}")
    if noise < 0:
        raise ValueError(f"noise must be non-negative, got {noise}")


def synth_blobs(classes: int, n: int, dim: int, noise: float, seed: int,
                val_fraction: float = 0.5) -> Dataset:
    """Isotropic Gaussian blobs around random class centers."""
    _check_sizes(classes, n, noise)
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(classes, dim)) * 2.0
    labels = _balanced_labels(classes, n)
    inputs = centers[labels] + noise * rng.normal(size=(n, dim))
    split = _split_tags(n, val_fraction, rng)
    return Dataset(normalize(inputs, split), labels.astype(np.int64), classes, split)


def synth_spirals(classes: int, n: int, noise: float, seed: int,
                  val_fraction: float = 0.5, turns: float = 1.0) -> Dataset:
    """Interleaved 2-D spiral arms, one per class."""
    _check_sizes(classes, n, noise)
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(classes, n)
    r = rng.uniform(0.05, 1.0, size=n)
    theta = (labels * 2 * np.pi / classes + r * 2 * np.pi * turns
             + noise * rng.normal(size=n))
    inputs = np.stack([r * np.sin(theta), r * np.cos(theta)], axis=1)
    split = _split_tags(n, val_fraction, rng)
    return Dataset(normalize(inputs, split), labels.astype(np.int64), classes, split)


# -- IDX -------------------------------------------------------------------------------


def _read_idx(path, expected_magic: int, ndims: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    head = 4 + 4 * ndims
    if len(raw) < head:
        raise IdxFormatError(f"{path}: header needs {head} bytes, file has {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(
            f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    dims = struct.unpack(">" + "I" * ndims, raw[4:head])
    expected = head + int(np.prod(dims, dtype=np.int64))
    if len(raw) != expected:
        raise IdxFormatError(
            f"{path}: expected {expected} bytes for dims {dims}, got {len(raw)}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    return _read_idx(path, IDX_IMAGES_MAGIC, 3)


def read_idx_labels(path) -> np.ndarray:
    return _read_idx(path, IDX_LABELS_MAGIC, 1)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8 or array.ndim not in (1, 3):
        raise IdxFormatError("only uint8 arrays with 1 (labels) or 3 (images) dims are written")
    magic = IDX_IMAGES_MAGIC if array.ndim == 3 else IDX_LABELS_MAGIC
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        fh.write(np.ascontiguousarray(array).tobytes())


def load_idx(images_path, labels_path, *, val_images=None, val_labels=None,
             normalize_inputs: bool = True) -> Dataset:
    """Images become (n, rows, cols, 1) scaled to [0, 1], then normalized."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxFormatError(f"{len(images)} images but {len(labels)} labels")
    split = np.full(len(labels), TRAIN, dtype=np.int8)
    if val_images is not None:
        vi, vl = read_idx_images(val_images), read_idx_labels(val_labels)
        if len(vi) != len(vl):
            raise IdxFormatError(f"{len(vi)} validation images but {len(vl)} labels")
        if vi.shape[1:] != images.shape[1:]:
            raise IdxFormatError(f"validation image size {vi.shape[1:]} != {images.shape[1:]}")
        images = np.concatenate([images, vi])
        labels = np.concatenate([labels, vl])
        split = np.concatenate([split, np.full(len(vl), VAL, dtype=np.int8)])
    x = (images.astype(np.float32) / 255.0)[..., None]
    if normalize_inputs:
        x = normalize(x, split)
    return Dataset(x, labels.astype(np.int64), int(labels.max()) + 1, split)


# -- batching ---------------------------------------------------------------------------


def batches(dataset: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[Batch]:
    """One epoch of shuffled minibatches; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        yield dataset.batch(order[start:start + batch_size])


def batch_stream(dataset: Dataset, batch_size: int, seed: int) -> Iterator[Batch]:
    """Endless minibatches, reshuffled each epoch."""
    epoch = 0
    while True:
        yield from batches(dataset, batch_size, seed, epoch)
        epoch += 1
