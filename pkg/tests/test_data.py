import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quped.data import (BatchStream, Dataset, PartitionSpec, batch_iterator, epoch_seed, gen_synthetic,
                        load_idx, partition_heterogeneous, read_idx_images, read_idx_labels, to_csv,
                        write_idx_images, write_idx_labels)
from quped.errors import BadMagicError, ConfigError, CountMismatchError, FeasibilityError, TruncatedFileError


def test_gen_synthetic_zero_spread_and_determinism():
    ds = gen_synthetic(4, 3, 5, 0.0, seed=1)
    for k in range(4):
        rows = ds.features[ds.labels == k]
        assert np.all(rows == rows[0])
        assert np.linalg.norm(rows[0]) == pytest.approx(1.0, abs=1e-12)
    again = gen_synthetic(4, 3, 5, 0.0, seed=1)
    assert ds.features.tobytes() == again.features.tobytes()
    assert ds.labels.tobytes() == again.labels.tobytes()


def test_gen_synthetic_rejects_one_class():
    with pytest.raises(ConfigError):
        gen_synthetic(1, 2, 5, 0.1, 0)


def test_gen_synthetic_linearly_separable():
    ds = gen_synthetic(4, 2, 100, 0.05, seed=0)
    # multinomial logistic regression by plain gradient descent as the convex solver
    X = np.hstack([ds.features, np.ones((len(ds), 1))])
    Y = np.eye(4)[ds.labels]
    W = np.zeros((3, 4))
    for _ in range(3000):
        Z = X @ W
        P = np.exp(Z - Z.max(axis=1, keepdims=True))
        P /= P.sum(axis=1, keepdims=True)
        W -= 1.0 * X.T @ (P - Y) / len(ds)
    assert np.mean((X @ W).argmax(axis=1) == ds.labels) == 1.0


def test_dataset_validates_labels():
    with pytest.raises(ConfigError):
        Dataset(np.zeros((2, 2)), np.array([0, 3]), 3)


def test_csv_export(tmp_path):
    ds = gen_synthetic(2, 2, 2, 0.1, 0)
    p = tmp_path / "d.csv"
    to_csv(ds, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "f0,f1,label"
    assert len(lines) == 5
    first = lines[1].split(",")
    assert float(first[0]) == ds.features[0, 0] and int(first[2]) == ds.labels[0]


# -- IDX -------------------------------------------------------------------

def _fixture(tmp_path):
    """Two 2x3 images, hand-written byte by byte."""
    img = bytes([0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3,
                 0, 255, 51, 102, 153, 204,
                 1, 2, 3, 4, 5, 6])
    lab = bytes([0, 0, 8, 1, 0, 0, 0, 2, 7, 3])
    (tmp_path / "img").write_bytes(img)
    (tmp_path / "lab").write_bytes(lab)
    return tmp_path / "img", tmp_path / "lab"


def test_idx_fixture_exact(tmp_path):
    ip, lp = _fixture(tmp_path)
    ds = load_idx(ip, lp)
    assert ds.features.shape == (2, 6) and ds.K == 10
    assert ds.features[0].tolist() == [0.0, 1.0, 0.2, 0.4, 0.6, 0.8]
    assert ds.features[1].tolist() == [v / 255 for v in (1, 2, 3, 4, 5, 6)]
    assert ds.labels.tolist() == [7, 3]


def test_idx_roundtrip_and_gzip(tmp_path):
    ip, lp = _fixture(tmp_path)
    imgs, labs = read_idx_images(ip), read_idx_labels(lp)
    write_idx_images(tmp_path / "i2", imgs)
    write_idx_labels(tmp_path / "l2", labs)
    assert (tmp_path / "i2").read_bytes() == ip.read_bytes()
    assert (tmp_path / "l2").read_bytes() == lp.read_bytes()
    (tmp_path / "i.gz").write_bytes(gzip.compress(ip.read_bytes()))
    assert np.array_equal(read_idx_images(tmp_path / "i.gz"), imgs)


def test_idx_errors(tmp_path):
    ip, lp = _fixture(tmp_path)
    with pytest.raises(BadMagicError):
        read_idx_images(lp)
    with pytest.raises(BadMagicError):
        read_idx_labels(ip)
    (tmp_path / "short").write_bytes(ip.read_bytes()[:-1])
    with pytest.raises(TruncatedFileError):
        read_idx_images(tmp_path / "short")
    (tmp_path / "tiny").write_bytes(b"\x00\x00\x08")
    with pytest.raises(TruncatedFileError):
        read_idx_labels(tmp_path / "tiny")
    (tmp_path / "lab3").write_bytes(struct.pack(">II", 0x801, 3) + bytes([1, 2, 3]))
    with pytest.raises(CountMismatchError):
        load_idx(ip, tmp_path / "lab3")
    assert issubclass(BadMagicError, Exception) and BadMagicError is not TruncatedFileError


# -- partitioning ----------------------------------------------------------

def _reference_partition(labels, K, spec):
    """Re-implementation of the documented seeded draw."""
    rng = np.random.default_rng(spec.seed)
    pools = [rng.permutation(np.flatnonzero(labels == k)) for k in range(K)]
    table = []
    for _ in range(spec.n_clients):
        table.append(sorted(int(v) for v in rng.choice(K, size=spec.classes_per_client, replace=False)))
        # skip nothing else: the sampler draws no further random numbers per client
    return table, pools


def test_partition_matches_reference_and_is_disjoint():
    ds = gen_synthetic(6, 2, 600, 0.1, 0)
    spec = PartitionSpec(8, 3, 150, 50, seed=4)
    shards = partition_heterogeneous(ds, spec)
    table, _ = _reference_partition(ds.labels, 6, spec)
    assert [list(s.classes) for s in shards] == table
    used = []
    for s in shards:
        assert len(s.train) == 150 and len(s.test) == 50
        assert set(s.train).isdisjoint(s.test)
        assert set(ds.labels[s.train]) == set(s.classes) == set(ds.labels[s.test])
        used.extend(s.train.tolist() + s.test.tolist())
    assert len(used) == len(set(used))


def test_partition_iid_like_and_infeasible():
    ds = gen_synthetic(3, 2, 20, 0.1, 0)
    shards = partition_heterogeneous(ds, PartitionSpec(2, 3, 9, 3, 0))
    assert all(s.classes == (0, 1, 2) for s in shards)
    with pytest.raises(FeasibilityError, match="class"):
        partition_heterogeneous(ds, PartitionSpec(5, 3, 15, 3, 0))
    with pytest.raises(ConfigError):
        partition_heterogeneous(ds, PartitionSpec(2, 4, 9, 3, 0))


# -- batching --------------------------------------------------------------

def test_batch_iterator_single_batch_and_permutation():
    ds = gen_synthetic(2, 2, 10, 0.1, 0)
    shard = np.arange(3, 15)
    batches = list(batch_iterator(ds, shard, 100, 5))
    assert len(batches) == 1 and len(batches[0]) == 12
    batches = list(batch_iterator(ds, shard, 5, 5))
    assert [len(b) for b in batches] == [5, 5, 2]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 50), st.integers(0, 2**31))
def test_epoch_is_a_permutation(n, bs, seed):
    features = np.arange(n, dtype=float)[:, None]
    ds = Dataset(features, np.zeros(n, dtype=int), 2)
    rows = np.concatenate([b.inputs[:, 0] for b in batch_iterator(ds, np.arange(n), bs, seed)])
    assert sorted(rows.tolist()) == list(range(n))


def test_different_epoch_seeds_give_different_orders():
    ds = Dataset(np.arange(10, dtype=float)[:, None], np.zeros(10, dtype=int), 2)
    a = np.concatenate([b.inputs[:, 0] for b in batch_iterator(ds, np.arange(10), 4, epoch_seed(0, 0))])
    b = np.concatenate([b.inputs[:, 0] for b in batch_iterator(ds, np.arange(10), 4, epoch_seed(0, 1))])
    assert not np.array_equal(a, b)


def test_batch_iterator_rejects_zero_batch():
    ds = gen_synthetic(2, 2, 3, 0.1, 0)
    with pytest.raises(ConfigError):
        list(batch_iterator(ds, np.arange(3), 0, 0))


def test_batch_stream_epochs():
    ds = Dataset(np.arange(5, dtype=float)[:, None], np.zeros(5, dtype=int), 2)
    s = BatchStream(ds, np.arange(5), 2, seed=3)
    assert s.steps_per_epoch == 3
    rows = [s.next().inputs[:, 0].tolist() for _ in range(6)]
    assert sorted(sum(rows[:3], [])) == [0, 1, 2, 3, 4]
    assert sorted(sum(rows[3:], [])) == [0, 1, 2, 3, 4]
    assert s.epoch == 1
