"""Datasets, IDX ingestion, heterogeneous client partitions and batching."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import (BadMagicError, ConfigError, CountMismatchError,
                     FeasibilityError, TruncatedFileError)
from .net import Batch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    K: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ConfigError("dataset needs a non-empty feature matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ConfigError("dataset needs one label per row")
        if self.labels.min() < 0 or self.labels.max() >= self.K:
            raise ConfigError(f"labels must lie in [0, {self.K})")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def batch(self, indices=None) -> Batch:
        if indices is None:
            return Batch(self.features, self.labels)
        return Batch(self.features[indices], self.labels[indices])


def gen_synthetic(K: int, dim: int, per_class: int, spread: float, seed) -> Dataset:
    """K isotropic Gaussian blobs whose means lie on the unit sphere."""
    if K < 2:
        raise ConfigError(f"need K >= 2 classes, got {K}")
    if dim < 1 or per_class < 1 or spread < 0:
        raise ConfigError("dim and per_class must be positive, spread non-negative")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((K, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    noise = rng.standard_normal((K, per_class, dim))
    features = (means[:, None, :] + spread * noise).reshape(K * per_class, dim)
    labels = np.repeat(np.arange(K), per_class)
    return Dataset(features, labels, K)


def to_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{j}" for j in range(ds.dim)] + ["label"])
        for row, label in zip(ds.features, ds.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


# ---------------------------------------------------------------------------
# IDX

def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_header(raw: bytes, expected_magic: int, ndims: int, path) -> tuple:
    need = 4 * (1 + ndims)
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: header needs {need} bytes, file has {len(raw)}")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: header needs {need} bytes, file has {len(raw)}")
    return struct.unpack(">" + "I" * ndims, raw[4:need])


def read_idx_images(path) -> np.ndarray:
    raw = _read_bytes(path)
    n, rows, cols = _parse_header(raw, IDX_IMAGES_MAGIC, 3, path)
    body = raw[16:]
    if len(body) < n * rows * cols:
        raise TruncatedFileError(f"{path}: expected {n * rows * cols} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=n * rows * cols).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    (n,) = _parse_header(raw, IDX_LABELS_MAGIC, 1, path)
    body = raw[8:]
    if len(body) < n:
        raise TruncatedFileError(f"{path}: expected {n} label bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=n)


def load_idx(images_path, labels_path, K: int = 10) -> Dataset:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64), K)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


# ---------------------------------------------------------------------------
# partitioning

@dataclass(frozen=True)
class PartitionSpec:
    n_clients: int
    classes_per_client: int
    train_per_client: int
    test_per_client: int
    seed: int = 0


@dataclass(frozen=True)
class ClientShard:
    train: np.ndarray
    test: np.ndarray
    classes: tuple


def _even_split(total: int, parts: int) -> list:
    base, extra = divmod(total, parts)
    return [base + (1 if j < extra else 0) for j in range(parts)]


def partition_heterogeneous(ds: Dataset, spec: PartitionSpec) -> list:
    """Give each client ``k`` random classes and disjoint train/test samples.

    Classes are drawn without replacement per client.  Sample counts are split
    as evenly as possible across the client's classes and drawn without
    replacement from a per-class pool shared by all clients, so no sample is
    used twice anywhere.
    """
    k = spec.classes_per_client
    if spec.n_clients < 1:
        raise ConfigError("need at least one client")
    if not 1 <= k <= ds.K:
        raise ConfigError(f"classes_per_client must be in [1, {ds.K}], got {k}")
    if spec.train_per_client < k or spec.test_per_client < 0:
        raise ConfigError("train_per_client must be >= classes_per_client and test_per_client >= 0")
    rng = np.random.default_rng(spec.seed)
    pools = [rng.permutation(np.flatnonzero(ds.labels == cls)) for cls in range(ds.K)]
    cursor = [0] * ds.K
    shards = []
    for client in range(spec.n_clients):
        classes = np.sort(rng.choice(ds.K, size=k, replace=False))
        n_train = _even_split(spec.train_per_client, k)
        n_test = _even_split(spec.test_per_client, k)
        train, test = [], []
        for cls, a, b in zip(classes, n_train, n_test):
            start = cursor[cls]
            if start + a + b > len(pools[cls]):
                raise FeasibilityError(
                    f"class {cls} has {len(pools[cls]) - start} samples left, "
                    f"client {client} needs {a + b}")
            train.append(pools[cls][start:start + a])
            test.append(pools[cls][start + a:start + a + b])
            cursor[cls] = start + a + b
        shards.append(ClientShard(np.concatenate(train), np.concatenate(test),
                                  tuple(int(c) for c in classes)))
    return shards


# ---------------------------------------------------------------------------
# batching

def epoch_seed(seed: int, epoch: int, stream: int = 0) -> int:
    """Deterministic per-(seed, stream, epoch) seed for batch shuffling."""
    return int(np.random.SeedSequence([int(seed), int(stream), int(epoch)]).generate_state(1)[0])


def batch_iterator(ds: Dataset, shard, batch_size: int, epoch_seed: int) -> Iterator[Batch]:
    """One epoch over ``shard`` (an index array) in a seeded order; short last batch kept."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng(epoch_seed).permutation(np.asarray(shard))
    for start in range(0, len(order), batch_size):
        yield ds.batch(order[start:start + batch_size])


class BatchStream:
    """Endless sequence of batches, reshuffled every epoch."""

    def __init__(self, ds: Dataset, shard, batch_size: int, seed: int, stream: int = 0):
        if len(shard) == 0:
            raise ConfigError("cannot draw batches from an empty shard")
        self.ds = ds
        self.shard = np.asarray(shard)
        self.batch_size = batch_size
        self.seed = seed
        self.stream = stream
        self.epoch = -1
        self._it = iter(())

    @property
    def steps_per_epoch(self) -> int:
        return -(-len(self.shard) // self.batch_size)

    def next(self) -> Batch:
        batch = next(self._it, None)
        if batch is None:
            self.epoch += 1
            self._it = batch_iterator(self.ds, self.shard, self.batch_size,
                                      epoch_seed(self.seed, self.epoch, self.stream))
            batch = next(self._it)
        return batch
