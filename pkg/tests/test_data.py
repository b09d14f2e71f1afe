import gzip
import struct

import numpy as np
import pytest

from cnnevo.data import (
    LabeledImageSet, load_cifar10, load_mnist, normalize, read_cifar10_batch, read_idx_images, read_idx_labels,
    shuffle_epoch, split, split_sizes, stratified_counts, subsample,
)
from cnnevo.errors import ConfigError, FormatError

from conftest import MNIST_DIR, requires_mnist


def write_idx_images(path, pixels):
    n, r, c = pixels.shape
    path.write_bytes(struct.pack(">IIII", 0x803, n, r, c) + pixels.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    path.write_bytes(struct.pack(">II", 0x801, len(labels)) + bytes(labels))


@pytest.fixture
def mnist_dir(tmp_path):
    pix = np.arange(2 * 28 * 28, dtype=np.uint32).reshape(2, 28, 28) % 256
    write_idx_images(tmp_path / "train-images-idx3-ubyte", pix)
    write_idx_labels(tmp_path / "train-labels-idx1-ubyte", [3, 9])
    write_idx_images(tmp_path / "t10k-images-idx3-ubyte", 255 - pix[:1])
    write_idx_labels(tmp_path / "t10k-labels-idx1-ubyte", [0])
    return tmp_path, pix


def test_normalization_endpoints():
    assert normalize(np.array([0, 255], np.uint8)).tolist() == [-1.0, 1.0]
    assert normalize(np.arange(256)).min() >= -1 and normalize(np.arange(256)).max() <= 1


def test_idx_fixture_round_trip(mnist_dir):
    d, pix = mnist_dir
    assert np.array_equal(read_idx_images(d / "train-images-idx3-ubyte"), pix)
    assert read_idx_labels(d / "train-labels-idx1-ubyte").tolist() == [3, 9]
    ds = load_mnist(d)
    assert ds.images.shape == (3, 1, 28, 28) and ds.images.dtype == np.float32
    assert ds.labels.tolist() == [3, 9, 0]
    assert np.array_equal(ds.images[:2, 0], normalize(pix))
    assert np.allclose((ds.images[:2, 0] + 1) * 127.5, pix, atol=1e-4)


def test_gzipped_idx(tmp_path, mnist_dir):
    d, pix = mnist_dir
    raw = (d / "train-images-idx3-ubyte").read_bytes()
    gz = tmp_path / "imgs.gz"
    gz.write_bytes(gzip.compress(raw))
    assert np.array_equal(read_idx_images(gz), pix)


def test_idx_errors_name_the_file(tmp_path, mnist_dir):
    d, pix = mnist_dir
    bad = tmp_path / "bad-labels"
    write_idx_labels(bad, [1, 10])
    with pytest.raises(FormatError, match="bad-labels"):
        read_idx_labels(bad)
    magic = tmp_path / "magic"
    magic.write_bytes(struct.pack(">IIII", 0x801, 1, 2, 2) + bytes(4))
    with pytest.raises(FormatError, match="magic"):
        read_idx_images(magic)
    short = tmp_path / "short"
    short.write_bytes((d / "train-images-idx3-ubyte").read_bytes()[:-5])
    with pytest.raises(FormatError, match="short"):
        read_idx_images(short)
    write_idx_labels(d / "train-labels-idx1-ubyte", [1, 2, 3])
    with pytest.raises(FormatError, match="train-labels"):
        load_mnist(d)


def test_missing_mnist_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mnist(tmp_path)


def cifar_record(label, value):
    return bytes([label]) + bytes([value]) * 3072


def test_cifar_record(tmp_path):
    path = tmp_path / "b.bin"
    path.write_bytes(cifar_record(7, 255))
    ds = read_cifar10_batch(path)
    assert ds.labels.tolist() == [7]
    assert ds.images.shape == (1, 3, 32, 32) and np.all(ds.images == 1.0)


def test_cifar_plane_order(tmp_path):
    pixels = np.zeros((3, 32, 32), np.uint8)
    pixels[0, 0, 1] = 255  # red plane, row 0, column 1
    pixels[2, 31, 31] = 255
    path = tmp_path / "b.bin"
    path.write_bytes(bytes([2]) + pixels.tobytes())
    img = read_cifar10_batch(path).images[0]
    assert img[0, 0, 1] == 1.0 and img[2, 31, 31] == 1.0 and img[1].max() == -1.0


def test_cifar_errors(tmp_path):
    empty = tmp_path / "empty.bin"
    empty.write_bytes(b"")
    with pytest.raises(FormatError):
        read_cifar10_batch(empty)
    odd = tmp_path / "odd.bin"
    odd.write_bytes(cifar_record(1, 0)[:-1])
    with pytest.raises(FormatError):
        read_cifar10_batch(odd)
    with pytest.raises(FileNotFoundError):
        load_cifar10(tmp_path)


def test_cifar_directory(tmp_path):
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]
    for i, name in enumerate(names):
        (tmp_path / name).write_bytes(cifar_record(i, i) + cifar_record(9, 0))
    ds = load_cifar10(tmp_path)
    assert len(ds) == 12
    assert ds.labels.tolist() == [0, 9, 1, 9, 2, 9, 3, 9, 4, 9, 5, 9]


def test_split_sizes():
    assert split_sizes(70000) == (52500, 7000, 10500)
    assert split_sizes(60000) == (45000, 6000, 9000)


@pytest.mark.parametrize("n", [20, 21, 37, 100, 999])
def test_split_disjoint_and_proportional(n):
    ds = LabeledImageSet(np.arange(n, dtype=np.float32).reshape(n, 1, 1, 1), np.arange(n) % 10)
    sp = split(ds, seed=1)
    parts = [s.images.ravel().astype(int) for s in (sp.train, sp.test, sp.val)]
    assert sorted(np.concatenate(parts).tolist()) == list(range(n))
    for size, ratio in zip(sp.sizes(), (0.75, 0.10, 0.15)):
        assert abs(size - n * ratio) <= 1
    again = split(ds, seed=1)
    assert np.array_equal(again.train.images, sp.train.images)
    assert not np.array_equal(split(ds, seed=2).train.images, sp.train.images)


def test_shuffle_epoch():
    ds = LabeledImageSet(np.arange(50, dtype=np.float32).reshape(50, 1, 1, 1), np.arange(50) % 10)
    a = shuffle_epoch(ds, np.random.default_rng(0))
    b = shuffle_epoch(ds, np.random.default_rng(1))
    assert sorted(a.images.ravel().tolist()) == list(range(50))
    assert not np.array_equal(a.images, b.images)
    assert np.array_equal(np.bincount(a.labels), np.bincount(ds.labels))
    assert np.array_equal(a.labels, a.images.ravel().astype(int) % 10)


def test_subsample():
    ds = LabeledImageSet(np.zeros((5000, 1, 1, 1), np.float32), np.arange(5000) % 10)
    sub = subsample(ds, 1000, seed=0)
    assert np.bincount(sub.labels).tolist() == [100] * 10
    assert len(subsample(ds, 5000, 0)) == 5000
    with pytest.raises(ConfigError):
        subsample(ds, 5001, 0)


def test_stratified_counts_sum():
    labels = np.array([0] * 7 + [1] * 2 + [2])
    counts = stratified_counts(labels, 5)
    assert sum(counts.values()) == 5
    assert counts == {0: 4, 1: 1, 2: 0}  # equal remainders go to the lower class


@requires_mnist
def test_official_mnist_counts():
    ds = load_mnist(MNIST_DIR)
    assert len(ds) == 70000
    assert ds.shape == (1, 28, 28)
    assert split(ds, 0).sizes() == (52500, 7000, 10500)
