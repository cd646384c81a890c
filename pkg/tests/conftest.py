import os
from pathlib import Path

import numpy as np
import pytest

from ifdetect.config import MNIST_FILES
from ifdetect.data import LabeledDataset, make_synthetic

MNIST_DIR = Path(os.environ.get("IFDETECT_MNIST_DIR", "/root/data/mnist"))


def mnist_available() -> bool:
    return all((MNIST_DIR / name).exists() for name in MNIST_FILES.values())


requires_mnist = pytest.mark.skipif(not mnist_available(), reason=f"MNIST IDX files not found in {MNIST_DIR}")

# Criterion lines collected by the acceptance module, echoed after the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_images(n=12, shape=(4, 4), n_classes=2, seed=0, split="train") -> LabeledDataset:
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_classes, n)
    return LabeledDataset(
        features=rng.random((n,) + shape),
        labels=labels,
        true_labels=labels,
        flip_mask=np.zeros(n, dtype=bool),
        class_names=tuple(range(n_classes)),
        split_tag=split,
    )


@pytest.fixture
def blobs():
    return make_synthetic(20, 3, 2.0, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
