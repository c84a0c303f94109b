"""Dataset loading, synthesis, and non-i.i.d. partitioning across devices.

The pipeline produces a SplitDataset with four disjoint parts: per-device
training shards, a server-held validation split (consumed only by the
valuation module), a global test split, and per-device held-out test splits
for personalization and fairness metrics. Features are scaled to [0, 1] and a
constant-1 bias column is appended, so downstream models stay strictly linear.

All randomness flows through explicit seeds; equal inputs give bitwise-equal
partitions.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import LOCAL_TEST, substream

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# magic byte 3 encodes the element type; only unsigned byte (0x08) is supported
_IDX_UBYTE = 0x08


class DataFormatError(ValueError):
    """Raised for malformed IDX input or impossible partition requests."""


def parse_idx(raw: bytes) -> np.ndarray:
    """Decode one IDX file into a uint8 array shaped per its header."""
    if len(raw) < 4:
        raise DataFormatError(f"IDX header truncated: {len(raw)} bytes")
    magic = struct.unpack(">I", raw[:4])[0]
    zeros, dtype_code, ndim = raw[0] << 8 | raw[1], raw[2], raw[3]
    if zeros != 0 or dtype_code != _IDX_UBYTE or ndim == 0:
        raise DataFormatError(f"bad IDX magic 0x{magic:08x}")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise DataFormatError(f"IDX header truncated: {len(raw)} bytes for {ndim} dims")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    expected = int(np.prod(dims, dtype=np.int64))
    payload = len(raw) - header_len
    if payload != expected:
        raise DataFormatError(
            f"IDX payload length mismatch: header 0x{magic:08x} with dims {list(dims)} "
            f"needs {expected} bytes, found {payload}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header_len).reshape(dims)


def write_idx(array: np.ndarray) -> bytes:
    """Serialize a uint8 array to IDX bytes; inverse of parse_idx."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(f">I{array.ndim}I", (_IDX_UBYTE << 8) | array.ndim, *array.shape)
    return header + array.tobytes()


def read_idx(path: str | Path) -> np.ndarray:
    """Read an IDX file from disk, transparently handling .gz."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return parse_idx(fh.read())


@dataclass
class DeviceDataset:
    """One device's local training shard plus its held-out test split.

    sample_indices are global dual-coordinate ids in a built SplitDataset
    (contiguous per device); straight out of partition_non_iid they are the
    original positions in the input sample arrays.
    """

    device_id: int
    features: np.ndarray
    labels: np.ndarray
    sample_indices: np.ndarray
    test_features: np.ndarray | None = None
    test_labels: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.features.shape[0]

    def label_histogram(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes)


@dataclass
class SplitDataset:
    devices: list[DeviceDataset]
    validation_features: np.ndarray
    validation_labels: np.ndarray
    test_features: np.ndarray
    test_labels: np.ndarray
    num_classes: int
    meta: dict = field(default_factory=dict)

    @property
    def total_train(self) -> int:
        return sum(dev.size for dev in self.devices)

    @property
    def feature_dim(self) -> int:
        return self.devices[0].features.shape[1]

    def stacked_train(self) -> tuple[np.ndarray, np.ndarray]:
        """All training shards vertically stacked in dual-coordinate order."""
        feats = np.vstack([dev.features for dev in self.devices])
        labels = np.concatenate([dev.labels for dev in self.devices])
        return feats, labels


def _label_aligned_shards(labels: np.ndarray, num_shards: int) -> list[np.ndarray]:
    """Cut label-sorted sample ids into single-label near-equal shards.

    The shard budget is apportioned across labels by largest remainder, so a
    device holding s shards sees at most s distinct labels.
    """
    order = np.argsort(labels, kind="stable")
    uniq, counts = np.unique(labels, return_counts=True)
    n = len(labels)
    if num_shards < len(uniq):
        # fewer shards than labels: single-label shards are impossible, fall
        # back to plain contiguous cuts of the sorted order
        return [chunk for chunk in np.array_split(order, num_shards)]

    alloc = np.ones(len(uniq), dtype=int)
    extra_total = num_shards - len(uniq)
    quota = counts / n * extra_total
    extra = np.floor(quota).astype(int)
    alloc += extra
    remainder = quota - extra
    short = extra_total - int(extra.sum())
    for idx in np.lexsort((np.arange(len(uniq)), -remainder))[:short]:
        alloc[idx] += 1
    # a shard holds at least one sample, so cap at the label's sample count
    over = alloc - counts
    if np.any(over > 0):
        alloc = np.minimum(alloc, counts)
        deficit = num_shards - int(alloc.sum())
        while deficit > 0:
            room = counts - alloc
            candidates = np.where(room > 0)[0]
            pick = candidates[np.argmax(counts[candidates] / alloc[candidates])]
            alloc[pick] += 1
            deficit -= 1

    shards: list[np.ndarray] = []
    start = 0
    for label_pos, count in enumerate(counts):
        block = order[start : start + count]
        shards.extend(np.array_split(block, alloc[label_pos]))
        start += count
    return shards


def shard_partition(
    labels: np.ndarray,
    num_devices: int,
    shards_per_device: int,
    seed: int,
    unbalanced: bool = False,
) -> list[np.ndarray]:
    """Assign sample ids to devices via the label-sorted shard scheme.

    Returns one id array per device; the union over devices is exactly
    range(len(labels)). In unbalanced mode each device draws its shard count
    from {1, ..., 2*shards_per_device - 1} (repaired to the exact shard
    supply), otherwise every device gets shards_per_device shards.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise DataFormatError("cannot partition an empty sample list")
    num_shards = num_devices * shards_per_device
    if num_shards > n:
        raise DataFormatError(
            f"{num_devices} devices x {shards_per_device} shards needs "
            f"{num_shards} shards but only {n} samples are available"
        )
    shards = _label_aligned_shards(labels, num_shards)
    rng = substream(seed)
    shard_order = rng.permutation(num_shards)

    if unbalanced:
        hi = 2 * shards_per_device  # exclusive, so draws land in {1, ..., 2s-1}
        quotas = rng.integers(1, hi, size=num_devices)
        diff = num_shards - int(quotas.sum())
        while diff != 0:
            i = int(rng.integers(num_devices))
            if diff > 0 and quotas[i] < hi - 1:
                quotas[i] += 1
                diff -= 1
            elif diff < 0 and quotas[i] > 1:
                quotas[i] -= 1
                diff += 1
    else:
        quotas = np.full(num_devices, shards_per_device)

    assignments: list[np.ndarray] = []
    cursor = 0
    for quota in quotas:
        picked = shard_order[cursor : cursor + quota]
        cursor += quota
        assignments.append(np.concatenate([shards[s] for s in picked]))
    return assignments


def partition_non_iid(
    features: np.ndarray,
    labels: np.ndarray,
    num_devices: int,
    shards_per_device: int,
    seed: int,
    unbalanced: bool = False,
) -> list[DeviceDataset]:
    """Partition training samples into non-i.i.d. per-device shards."""
    parts = shard_partition(labels, num_devices, shards_per_device, seed, unbalanced)
    return [
        DeviceDataset(
            device_id=m,
            features=features[idx],
            labels=np.asarray(labels)[idx],
            sample_indices=idx,
        )
        for m, idx in enumerate(parts)
    ]


def _carve_local_tests(
    devices: list[DeviceDataset], fraction: float, seed: int
) -> list[DeviceDataset]:
    """Move a seeded fraction of each shard into the device's test split.

    At least one training sample always remains; a single-sample device ends
    up with an empty local test split.
    """
    rng = substream(seed, LOCAL_TEST)
    carved = []
    for dev in devices:
        n = dev.size
        take = min(n - 1, int(round(fraction * n)))
        take = max(take, 0)
        test_pos = np.sort(rng.choice(n, size=take, replace=False))
        train_mask = np.ones(n, dtype=bool)
        train_mask[test_pos] = False
        carved.append(
            DeviceDataset(
                device_id=dev.device_id,
                features=dev.features[train_mask],
                labels=dev.labels[train_mask],
                sample_indices=dev.sample_indices[train_mask],
                test_features=dev.features[test_pos],
                test_labels=dev.labels[test_pos],
            )
        )
    return carved


def _assign_dual_ids(devices: list[DeviceDataset]) -> list[DeviceDataset]:
    """Renumber sample_indices as contiguous global dual-coordinate blocks."""
    cursor = 0
    for dev in devices:
        dev.sample_indices = np.arange(cursor, cursor + dev.size)
        cursor += dev.size
    return devices


def build_split(
    train_features: np.ndarray,
    train_labels: np.ndarray,
    test_features: np.ndarray,
    test_labels: np.ndarray,
    num_devices: int,
    shards_per_device: int,
    seed: int,
    validation_size: int = 5000,
    device_test_fraction: float = 0.2,
    unbalanced: bool = False,
) -> SplitDataset:
    """Shared pipeline: carve server validation, partition, carve local tests."""
    n = len(train_labels)
    if not 0 <= validation_size < n:
        raise DataFormatError(
            f"validation_size {validation_size} out of range for {n} training samples"
        )
    rng = substream(seed)
    val_pos = np.sort(rng.choice(n, size=validation_size, replace=False))
    train_mask = np.ones(n, dtype=bool)
    train_mask[val_pos] = False

    devices = partition_non_iid(
        train_features[train_mask],
        train_labels[train_mask],
        num_devices,
        shards_per_device,
        seed,
        unbalanced,
    )
    devices = _carve_local_tests(devices, device_test_fraction, seed)
    devices = _assign_dual_ids(devices)
    num_classes = int(max(train_labels.max(), test_labels.max())) + 1
    return SplitDataset(
        devices=devices,
        validation_features=train_features[val_pos],
        validation_labels=train_labels[val_pos],
        test_features=test_features,
        test_labels=test_labels,
        num_classes=num_classes,
        meta={
            "seed": seed,
            "num_devices": num_devices,
            "shards_per_device": shards_per_device,
            "unbalanced": unbalanced,
            "validation_size": validation_size,
            "device_test_fraction": device_test_fraction,
        },
    )


def _with_bias(features: np.ndarray) -> np.ndarray:
    ones = np.ones((features.shape[0], 1), dtype=features.dtype)
    return np.hstack([features, ones])


IDX_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def _find_idx(data_dir: Path, stem: str) -> Path:
    for candidate in (data_dir / stem, data_dir / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise DataFormatError(f"missing IDX file {stem}[.gz] under {data_dir}")


def load_idx_split(
    data_dir: str | Path,
    num_devices: int,
    shards_per_device: int,
    seed: int,
    validation_size: int = 5000,
    device_test_fraction: float = 0.2,
    unbalanced: bool = False,
    dtype=np.float32,
) -> SplitDataset:
    """Load an MNIST-layout IDX directory and build the full split.

    Expects the four canonical filenames (optionally gzipped). Pixels are
    scaled to [0, 1] and flattened; a bias column is appended.
    """
    data_dir = Path(data_dir)
    arrays = {key: read_idx(_find_idx(data_dir, stem)) for key, stem in IDX_FILES.items()}
    for key in ("train_images", "test_images"):
        if arrays[key].ndim != 3:
            raise DataFormatError(f"{IDX_FILES[key]} is not a rank-3 image tensor")
    for key in ("train_labels", "test_labels"):
        if arrays[key].ndim != 1:
            raise DataFormatError(f"{IDX_FILES[key]} is not a rank-1 label vector")
    if len(arrays["train_images"]) != len(arrays["train_labels"]):
        raise DataFormatError("train image/label counts disagree")
    if len(arrays["test_images"]) != len(arrays["test_labels"]):
        raise DataFormatError("test image/label counts disagree")

    def flat(images: np.ndarray) -> np.ndarray:
        out = images.reshape(len(images), -1).astype(dtype) / dtype(255.0)
        return _with_bias(out)

    split = build_split(
        flat(arrays["train_images"]),
        arrays["train_labels"].astype(np.int64),
        flat(arrays["test_images"]),
        arrays["test_labels"].astype(np.int64),
        num_devices,
        shards_per_device,
        seed,
        validation_size=validation_size,
        device_test_fraction=device_test_fraction,
        unbalanced=unbalanced,
    )
    split.meta["source"] = str(data_dir)
    split.meta["image_shape"] = list(arrays["train_images"].shape[1:])
    return split


def generate_synthetic(
    dim: int,
    train_size: int,
    num_devices: int,
    separation: float,
    seed: int,
    validation_size: int = 200,
    test_size: int = 400,
    device_test_size: int = 8,
    noise_scale: float = 0.5,
) -> SplitDataset:
    """Two Gaussian blobs with class-mean distance `separation`.

    All train_size samples stay in the training partition (a device can hold
    exactly one sample); validation, global test, and per-device test splits
    are fresh draws from the same blobs, per-device labels resampled from that
    device's own label histogram. Samples are dealt round-robin by label.
    """
    if dim < 1 or train_size < num_devices:
        raise DataFormatError(
            f"need dim >= 1 and train_size >= devices, got dim={dim}, "
            f"train_size={train_size}, devices={num_devices}"
        )
    rng = substream(seed)
    centers = np.zeros((2, dim))
    centers[0, 0] = -separation / 2.0
    centers[1, 0] = +separation / 2.0

    def draw(labels: np.ndarray) -> np.ndarray:
        return centers[labels] + noise_scale * rng.normal(size=(len(labels), dim))

    def balanced_labels(n: int) -> np.ndarray:
        return np.repeat([0, 1], [n - n // 2, n // 2])

    train_labels = balanced_labels(train_size)
    train_raw = draw(train_labels)
    lo, hi = train_raw.min(axis=0), train_raw.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)

    def scaled(raw: np.ndarray) -> np.ndarray:
        return _with_bias(np.clip((raw - lo) / span, 0.0, 1.0))

    train_feats = scaled(train_raw)
    order = np.arange(train_size)  # already label-sorted by construction
    devices = []
    for m in range(num_devices):
        idx = order[order % num_devices == m]
        devices.append(
            DeviceDataset(
                device_id=m,
                features=train_feats[idx],
                labels=train_labels[idx],
                sample_indices=idx,
            )
        )

    val_labels = balanced_labels(validation_size)
    test_labels = balanced_labels(test_size)
    val_feats = scaled(draw(val_labels))
    test_feats = scaled(draw(test_labels))

    for dev in devices:
        freq = np.bincount(dev.labels, minlength=2).astype(float)
        local_labels = rng.choice(2, size=device_test_size, p=freq / freq.sum())
        local_labels = np.sort(local_labels)
        dev.test_features = scaled(draw(local_labels))
        dev.test_labels = local_labels

    devices = _assign_dual_ids(devices)
    return SplitDataset(
        devices=devices,
        validation_features=val_feats,
        validation_labels=val_labels,
        test_features=test_feats,
        test_labels=test_labels,
        num_classes=2,
        meta={
            "seed": seed,
            "kind": "synthetic",
            "dim": dim,
            "separation": separation,
            "noise_scale": noise_scale,
        },
    )


def write_synthetic_image_corpus(
    out_dir: str | Path,
    num_classes: int = 10,
    side: int = 28,
    train_size: int = 60000,
    test_size: int = 10000,
    seed: int = 20240817,
    noise_scale: float = 110.0,
    templates_per_class: int = 1,
    background_weight: float = 0.0,
) -> Path:
    """Write an MNIST-layout IDX corpus of noisy class-template images.

    Used where the real dataset is unavailable: each sample is a random convex
    mix of its class's pixel templates, blended with a class-independent
    background, brightness-jittered, plus Gaussian pixel noise clipped to
    bytes. background_weight in [0, 1) and templates_per_class control how
    hard the corpus is for a linear model: a heavier shared background and
    more intra-class variation push the one-vs-rest ceiling below perfect,
    which is the regime the policy experiments need. Deterministic given the
    seed.
    """
    if not 0.0 <= background_weight < 1.0:
        raise DataFormatError(
            f"background_weight must be in [0, 1), got {background_weight}"
        )
    if templates_per_class < 1:
        raise DataFormatError(
            f"templates_per_class must be >= 1, got {templates_per_class}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = substream(seed)
    templates = rng.uniform(
        30.0, 225.0, size=(num_classes, templates_per_class, side * side)
    )
    background = rng.uniform(30.0, 225.0, size=side * side)

    def render(labels: np.ndarray) -> np.ndarray:
        weights = rng.dirichlet(np.ones(templates_per_class), size=len(labels))
        mixed = np.einsum("nk,nkp->np", weights, templates[labels])
        pixels = background_weight * background + (1.0 - background_weight) * mixed
        pixels *= rng.uniform(0.7, 1.15, size=(len(labels), 1))
        pixels += noise_scale * rng.normal(size=pixels.shape)
        images = np.clip(pixels, 0.0, 255.0).astype(np.uint8)
        return images.reshape(len(labels), side, side)

    def class_balanced(n: int) -> np.ndarray:
        labels = np.arange(n) % num_classes
        rng.shuffle(labels)
        return labels

    train_labels = class_balanced(train_size)
    test_labels = class_balanced(test_size)
    files = {
        "train_images": render(train_labels),
        "train_labels": train_labels.astype(np.uint8),
        "test_images": render(test_labels),
        "test_labels": test_labels.astype(np.uint8),
    }
    for key, stem in IDX_FILES.items():
        (out_dir / stem).write_bytes(write_idx(files[key]))
    return out_dir
