"""IDX codec, partitioner, and dataset-builder contracts."""
import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedsel.data import (
    DataFormatError,
    IDX_FILES,
    build_split,
    generate_synthetic,
    load_idx_split,
    parse_idx,
    read_idx,
    shard_partition,
    write_idx,
    write_synthetic_image_corpus,
)


def idx_bytes(magic_ndim: int, dims: tuple[int, ...], payload: bytes) -> bytes:
    return struct.pack(f">I{len(dims)}I", magic_ndim, *dims) + payload


def test_parse_idx_image_header_arithmetic():
    raw = idx_bytes(0x00000803, (10000, 28, 28), bytes(7_840_000))
    tensor = parse_idx(raw)
    assert tensor.shape == (10000, 28, 28)
    assert tensor.dtype == np.uint8


def test_parse_idx_label_header_arithmetic():
    raw = idx_bytes(0x00000801, (10000,), bytes(10_000))
    labels = parse_idx(raw)
    assert labels.shape == (10000,)


def test_parse_idx_payload_mismatch():
    raw = idx_bytes(0x00000803, (10000, 28, 28), bytes(100))
    with pytest.raises(DataFormatError, match="mismatch"):
        parse_idx(raw)


def test_parse_idx_bad_magic():
    with pytest.raises(DataFormatError, match="magic"):
        parse_idx(idx_bytes(0x12340803, (4,), bytes(4)))
    with pytest.raises(DataFormatError, match="truncated"):
        parse_idx(b"\x00\x00")


@given(
    arr=arrays(
        dtype=np.uint8,
        shape=st.one_of(
            st.tuples(st.integers(0, 8)),
            st.tuples(st.integers(0, 5), st.integers(1, 5)),
            st.tuples(st.integers(0, 4), st.integers(1, 3), st.integers(1, 3)),
        ),
    )
)
@settings(max_examples=80, deadline=None)
def test_idx_round_trip(arr):
    assert np.array_equal(parse_idx(write_idx(arr)), arr)


def test_read_idx_handles_gzip(tmp_path):
    arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    plain = tmp_path / "x-idx3-ubyte"
    plain.write_bytes(write_idx(arr))
    gz = tmp_path / "y-idx3-ubyte.gz"
    gz.write_bytes(gzip.compress(write_idx(arr)))
    assert np.array_equal(read_idx(plain), arr)
    assert np.array_equal(read_idx(gz), arr)


# -- partitioner -------------------------------------------------------------


def test_shard_partition_label_witness():
    # 2 shards per device, label-aligned shards -> <= 2 distinct labels each
    rng = np.random.default_rng(0)
    labels = rng.integers(10, size=6000)
    parts = shard_partition(labels, num_devices=100, shards_per_device=2, seed=5)
    assert sorted(np.concatenate(parts).tolist()) == list(range(6000))
    for ids in parts:
        assert len(np.unique(labels[ids])) <= 2


def test_shard_partition_single_device():
    labels = np.array([3, 1, 4, 1, 5])
    (only,) = shard_partition(labels, num_devices=1, shards_per_device=1, seed=1)
    assert sorted(only.tolist()) == [0, 1, 2, 3, 4]


def test_shard_partition_deterministic():
    labels = np.random.default_rng(2).integers(10, size=2000)
    a = shard_partition(labels, 20, 2, seed=9)
    b = shard_partition(labels, 20, 2, seed=9)
    c = shard_partition(labels, 20, 2, seed=10)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert any(not np.array_equal(x, y) for x, y in zip(a, c))


def test_shard_partition_unbalanced_quotas():
    labels = np.random.default_rng(3).integers(10, size=6000)
    parts = shard_partition(labels, 100, 2, seed=4, unbalanced=True)
    assert sorted(np.concatenate(parts).tolist()) == list(range(6000))
    shard_counts = {round(len(ids) / 30) for ids in parts}  # shard size ~30 here
    # quotas drawn from {1, 2, 3}; repair keeps the total exact
    assert shard_counts <= {1, 2, 3}
    assert len(shard_counts) > 1
    assert sum(len(ids) for ids in parts) == 6000


def test_shard_partition_errors():
    with pytest.raises(DataFormatError, match="empty"):
        shard_partition(np.array([], dtype=int), 1, 1, seed=0)
    with pytest.raises(DataFormatError, match="shards"):
        shard_partition(np.arange(10) % 2, num_devices=8, shards_per_device=2, seed=0)


# -- synthetic blobs ---------------------------------------------------------


def _ridge_fit_accuracy(features, labels, features_eval, labels_eval):
    targets = np.where(labels == 1, 1.0, -1.0)
    d = features.shape[1]
    gram = features.T @ features + 1e-8 * np.eye(d)
    w = np.linalg.solve(gram, features.T @ targets)
    pred = (features_eval @ w > 0).astype(int)
    return float(np.mean(pred == labels_eval))


def test_synthetic_separable_reaches_perfect_train_accuracy():
    split = generate_synthetic(dim=2, train_size=200, num_devices=4, separation=4.0, seed=1)
    feats, labels = split.stacked_train()
    assert _ridge_fit_accuracy(feats, labels, feats, labels) == 1.0


def test_synthetic_zero_separation_is_chance_level():
    split = generate_synthetic(dim=2, train_size=400, num_devices=4, separation=0.0, seed=1)
    feats, labels = split.stacked_train()
    acc = _ridge_fit_accuracy(feats, labels, split.test_features, split.test_labels)
    assert 0.35 <= acc <= 0.65


def test_synthetic_one_sample_per_device():
    split = generate_synthetic(dim=3, train_size=8, num_devices=8, separation=2.0, seed=2)
    assert [d.size for d in split.devices] == [1] * 8
    assert split.total_train == 8


def test_synthetic_shapes_and_meta():
    split = generate_synthetic(dim=5, train_size=60, num_devices=6, separation=2.0, seed=3)
    assert split.feature_dim == 6  # bias column appended
    assert split.num_classes == 2
    assert len(split.validation_labels) == 200
    assert len(split.test_labels) == 400
    for dev in split.devices:
        assert dev.test_features is not None and len(dev.test_labels) == 8
    assert split.meta["kind"] == "synthetic"
    with pytest.raises(DataFormatError):
        generate_synthetic(dim=0, train_size=10, num_devices=2, separation=1.0, seed=1)


# -- IDX corpus and full split -----------------------------------------------


def test_corpus_writer_is_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for out in (a, b):
        write_synthetic_image_corpus(
            out, train_size=600, test_size=100, noise_scale=110.0,
            templates_per_class=2, background_weight=0.4, seed=77,
        )
    for name in IDX_FILES.values():
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_corpus_writer_validation(tmp_path):
    with pytest.raises(DataFormatError, match="background_weight"):
        write_synthetic_image_corpus(tmp_path / "x", background_weight=1.0)
    with pytest.raises(DataFormatError, match="templates_per_class"):
        write_synthetic_image_corpus(tmp_path / "y", templates_per_class=0)


def test_load_idx_split_layout(idx_corpus):
    corpus_dir, _ = idx_corpus
    split = load_idx_split(
        corpus_dir, num_devices=100, shards_per_device=2, seed=1,
        validation_size=5000, device_test_fraction=0.2,
    )
    assert len(split.devices) == 100
    assert split.num_classes == 10
    assert split.feature_dim == 28 * 28 + 1
    assert len(split.validation_labels) == 5000
    assert len(split.test_labels) == 10000
    # validation + per-device train/test exactly partition the 60k train pool
    per_device = sum(d.size + len(d.test_labels) for d in split.devices)
    assert per_device + 5000 == 60000
    for dev in split.devices:
        assert len(np.unique(dev.labels)) <= 2
        held_out = len(dev.test_labels) / (dev.size + len(dev.test_labels))
        assert held_out == pytest.approx(0.2, abs=0.05)


def test_load_idx_split_missing_file(tmp_path):
    with pytest.raises(DataFormatError, match="missing IDX file"):
        load_idx_split(tmp_path, num_devices=2, shards_per_device=2, seed=1)


def test_build_split_dual_ids_are_contiguous():
    rng = np.random.default_rng(5)
    feats = rng.uniform(size=(300, 4))
    labels = rng.integers(3, size=300)
    split = build_split(
        feats, labels, feats[:50], labels[:50],
        num_devices=5, shards_per_device=2, seed=8,
        validation_size=30, device_test_fraction=0.2,
    )
    cursor = 0
    for dev in split.devices:
        assert np.array_equal(dev.sample_indices, np.arange(cursor, cursor + dev.size))
        cursor += dev.size
    stacked_feats, stacked_labels = split.stacked_train()
    assert stacked_feats.shape[0] == cursor == split.total_train
    assert len(stacked_labels) == cursor
