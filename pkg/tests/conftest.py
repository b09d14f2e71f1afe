import os

import numpy as np
import pytest

from cnnevo.data import DatasetSplit, LabeledImageSet

MNIST_DIR = os.environ.get("CNNEVO_MNIST_DIR", "/root/data/mnist")


def toy_images(n, seed, side=12):
    """Ten easy classes: a bright 3x3 blob whose position encodes the label, plus noise."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    images = rng.normal(-0.8, 0.2, (n, 1, side, side)).astype(np.float32)
    for i, y in enumerate(labels):
        r, c = divmod(int(y), 5)
        images[i, 0, 2 + 5 * r : 5 + 5 * r, 1 + 2 * c : 4 + 2 * c] += 1.5
    return LabeledImageSet(np.clip(images, -1, 1), labels.astype(np.int64))


def make_toy_split(n_train=300, n_test=100, n_val=100, seed=0):
    return DatasetSplit(toy_images(n_train, seed), toy_images(n_test, seed + 1), toy_images(n_val, seed + 2))


@pytest.fixture(scope="session")
def toy_split():
    return make_toy_split()


def mnist_available():
    return os.path.exists(os.path.join(MNIST_DIR, "train-images-idx3-ubyte")) or os.path.exists(
        os.path.join(MNIST_DIR, "train-images-idx3-ubyte.gz"))


requires_mnist = pytest.mark.skipif(not mnist_available(), reason=f"MNIST not found in {MNIST_DIR}")


ACCEPTANCE_LINES = []


def record_criterion(number, title, ok, detail):
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
