"""Locating MNIST IDX files, or building a small subset when none are present.

The official MNIST files are used when found.  Without network access the
bundled 5000-image subset of ``mlxtend`` (500 per digit) is converted to the
same IDX layout; install it with ``pip install mlxtend``.
"""
from __future__ import annotations

import os
import sys
from pathlib import Path

import numpy as np

from ..data import Dataset, load_idx, write_idx_images, write_idx_labels
from ..errors import ConfigError

ENV_VAR = "QUPED_DATA_DIR"
IMAGES = "train-images-idx3-ubyte"
LABELS = "train-labels-idx1-ubyte"


def data_dir(configured: str = "") -> Path:
    if configured:
        return Path(configured)
    return Path(os.environ.get(ENV_VAR) or "data/mnist")


def _find(directory: Path, stem: str):
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    return None


def build_subset(directory) -> Path:
    """Write the mlxtend MNIST subset as IDX files into ``directory``."""
    try:
        from mlxtend.data import mnist_data
    except ImportError:
        raise ConfigError(f"no MNIST IDX files in {directory} and mlxtend is not installed "
                          f"(pip install mlxtend, or set {ENV_VAR})") from None
    X, y = mnist_data()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_idx_images(directory / IMAGES, np.rint(X).astype(np.uint8).reshape(-1, 28, 28))
    write_idx_labels(directory / LABELS, y.astype(np.uint8))
    return directory


def load_mnist(configured: str = "", build: bool = True) -> Dataset:
    directory = data_dir(configured)
    images, labels = _find(directory, IMAGES), _find(directory, LABELS)
    if images is None or labels is None:
        if not build:
            raise ConfigError(f"no MNIST IDX files in {directory}")
        build_subset(directory)
        images, labels = directory / IMAGES, directory / LABELS
    return load_idx(images, labels, K=10)


if __name__ == "__main__":
    target = build_subset(sys.argv[1] if len(sys.argv) > 1 else data_dir())
    print(f"wrote {target / IMAGES} and {target / LABELS}")
