"""MNIST / CIFAR-10 readers, normalization and the train/test/validation split."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
SPLIT_RATIOS = (0.75, 0.10, 0.15)

MNIST_FILES = (
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
)
CIFAR_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6)) + ("test_batch.bin",)


@dataclass
class LabeledImageSet:
    images: np.ndarray  # float32 [N, C, H, W] in [-1, 1]
    labels: np.ndarray  # int64 [N]

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "LabeledImageSet":
        return LabeledImageSet(self.images[idx], self.labels[idx])

    @classmethod
    def concat(cls, *sets):
        return cls(np.concatenate([s.images for s in sets]), np.concatenate([s.labels for s in sets]))


@dataclass
class DatasetSplit:
    train: LabeledImageSet
    test: LabeledImageSet
    val: LabeledImageSet

    def sizes(self):
        return len(self.train), len(self.test), len(self.val)


def normalize(pixels) -> np.ndarray:
    """Map u8 pixels onto [-1, 1] (0 -> -1, 255 -> 1)."""
    return (np.asarray(pixels, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _find(dir_path, name):
    for candidate in (name, name + ".gz", name.replace("-idx", ".idx")):
        p = os.path.join(dir_path, candidate)
        if os.path.exists(p):
            return p
    raise FileNotFoundError(os.path.join(dir_path, name))


def read_idx_images(path) -> np.ndarray:
    """Raw u8 images [N, rows, cols] from an IDX3 file."""
    data = _read_bytes(path)
    if len(data) < 16:
        raise FormatError(f"{path}: truncated IDX header")
    magic, n, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{path}: bad IDX image magic 0x{magic:08x}")
    if len(data) != 16 + n * rows * cols:
        raise FormatError(f"{path}: expected {n}x{rows}x{cols} pixels, file has {len(data) - 16} bytes")
    return np.frombuffer(data, dtype=np.uint8, offset=16).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    data = _read_bytes(path)
    if len(data) < 8:
        raise FormatError(f"{path}: truncated IDX header")
    magic, n = struct.unpack(">II", data[:8])
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"{path}: bad IDX label magic 0x{magic:08x}")
    if len(data) != 8 + n:
        raise FormatError(f"{path}: expected {n} labels, file has {len(data) - 8} bytes")
    labels = np.frombuffer(data, dtype=np.uint8, offset=8)
    if labels.size and labels.max() > 9:
        raise FormatError(f"{path}: label {int(labels.max())} outside 0-9")
    return labels


def load_idx_pair(image_path, label_path) -> LabeledImageSet:
    images = read_idx_images(image_path)
    labels = read_idx_labels(label_path)
    if len(images) != len(labels):
        raise FormatError(f"{label_path}: {len(labels)} labels for {len(images)} images in {image_path}")
    return LabeledImageSet(normalize(images)[:, None], labels.astype(np.int64))


def load_mnist(dir_path, parts=("train", "test")) -> LabeledImageSet:
    """Official training and test files concatenated (70000 images for the full set)."""
    sets = []
    for part, (img, lbl) in zip(("train", "test"), MNIST_FILES):
        if part in parts:
            sets.append(load_idx_pair(_find(dir_path, img), _find(dir_path, lbl)))
    return LabeledImageSet.concat(*sets)


def read_cifar10_batch(path) -> LabeledImageSet:
    data = _read_bytes(path)
    if len(data) == 0 or len(data) % CIFAR_RECORD:
        raise FormatError(f"{path}: length {len(data)} is not a positive multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0]
    if labels.max() > 9:
        raise FormatError(f"{path}: label {int(labels.max())} outside 0-9")
    images = normalize(rec[:, 1:]).reshape(-1, 3, 32, 32)
    return LabeledImageSet(images, labels.astype(np.int64))


def load_cifar10(dir_path) -> LabeledImageSet:
    """The five training batches followed by the test batch (60000 images)."""
    paths = []
    for name in CIFAR_FILES:
        p = os.path.join(dir_path, name)
        if not os.path.exists(p):
            raise FileNotFoundError(p)
        paths.append(p)
    return LabeledImageSet.concat(*(read_cifar10_batch(p) for p in paths))


def load_dataset(name, dir_path) -> LabeledImageSet:
    if name == "mnist":
        return load_mnist(dir_path)
    if name == "cifar10":
        return load_cifar10(dir_path)
    raise ConfigError(f"unknown dataset {name!r}")


def split_sizes(n, ratios=SPLIT_RATIOS):
    n_train = int(round(n * ratios[0]))
    n_test = int(round(n * ratios[1]))
    return n_train, n_test, n - n_train - n_test


def split(dataset: LabeledImageSet, seed) -> DatasetSplit:
    """Seeded shuffle, then contiguous 75/10/15 cut into train/test/val."""
    perm = np.random.default_rng(seed).permutation(len(dataset))
    n_train, n_test, _ = split_sizes(len(dataset))
    return DatasetSplit(
        dataset.subset(perm[:n_train]),
        dataset.subset(perm[n_train : n_train + n_test]),
        dataset.subset(perm[n_train + n_test :]),
    )


def shuffle_epoch(dataset: LabeledImageSet, rng) -> LabeledImageSet:
    return dataset.subset(rng.permutation(len(dataset)))


def stratified_counts(labels, n):
    """Per-class sample counts proportional to class frequency (largest remainder)."""
    classes, counts = np.unique(labels, return_counts=True)
    exact = n * counts / counts.sum()
    quota = np.floor(exact).astype(int)
    order = np.lexsort((classes, -(exact - quota)))
    for i in order[: n - quota.sum()]:
        quota[i] += 1
    return dict(zip(classes.tolist(), quota.tolist()))


def subsample(dataset: LabeledImageSet, n, seed) -> LabeledImageSet:
    """Seeded class-stratified sample of ``n`` items, kept in original order."""
    if n > len(dataset) or n < 0:
        raise ConfigError(f"cannot draw {n} samples from a set of {len(dataset)}")
    if n == len(dataset):
        return dataset.subset(np.arange(n))
    rng = np.random.default_rng(seed)
    picked = []
    for cls, k in stratified_counts(dataset.labels, n).items():
        idx = np.flatnonzero(dataset.labels == cls)
        picked.append(rng.choice(idx, size=k, replace=False))
    return dataset.subset(np.sort(np.concatenate(picked)))
