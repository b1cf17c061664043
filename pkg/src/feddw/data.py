"""Dataset loading (IDX image/label files, synthetic Gaussian blobs) and
Dirichlet-based non-IID partitioning into client shards.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError
from .numerics import Rng, sample_dirichlet

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
BLOB_MAGIC = b"FDWBLOB1"


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64
    class_count: int

    def __post_init__(self):
        if self.features.ndim != 2:
            raise InvalidInputError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise InvalidInputError(
                f"{self.features.shape[0]} feature rows vs {self.labels.shape} labels"
            )
        if self.labels.size and int(self.labels.max()) >= self.class_count:
            raise InvalidInputError(
                f"label {int(self.labels.max())} >= class_count {self.class_count}"
            )

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class Partition:
    shards: tuple[np.ndarray, ...]
    beta: float
    seed: int


def _open_maybe_gz(path: Path, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def _write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    if str(path).endswith(".gz"):
        # mtime pinned so identical content yields identical bytes
        with open(path, "wb") as raw, gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as z:
            z.write(payload)
    else:
        path.write_bytes(payload)


def _read_exact(f, count: int, path: Path, what: str) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise FormatError(f"{path}: truncated while reading {what} ({len(data)}/{count} bytes)")
    return data


def load_idx_images(path) -> np.ndarray:
    """Read a big-endian IDX3 image file into a uint8 array (n, rows, cols)."""
    path = Path(path)
    with _open_maybe_gz(path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, path, "image header"))
        if magic != IMAGE_MAGIC:
            raise FormatError(f"{path}: image magic 0x{magic:08x} != 0x{IMAGE_MAGIC:08x}")
        pixels = _read_exact(f, count * rows * cols, path, "pixel data")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(count, rows, cols)


def load_idx_labels(path) -> np.ndarray:
    path = Path(path)
    with _open_maybe_gz(path, "rb") as f:
        magic, count = struct.unpack(">II", _read_exact(f, 8, path, "label header"))
        if magic != LABEL_MAGIC:
            raise FormatError(f"{path}: label magic 0x{magic:08x} != 0x{LABEL_MAGIC:08x}")
        raw = _read_exact(f, count, path, "label data")
    return np.frombuffer(raw, dtype=np.uint8)


def save_idx_images(path, images: np.ndarray) -> None:
    images = np.ascontiguousarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise InvalidInputError(f"images must be (n, rows, cols), got shape {images.shape}")
    _write_bytes(path, struct.pack(">IIII", IMAGE_MAGIC, *images.shape) + images.tobytes())


def save_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    if labels.ndim != 1:
        raise InvalidInputError(f"labels must be 1-D, got shape {labels.shape}")
    _write_bytes(path, struct.pack(">II", LABEL_MAGIC, labels.size) + labels.tobytes())


def load_mnist(images_path, labels_path) -> Dataset:
    """Load an IDX image/label pair, scaling pixels to [0, 1]."""
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"image count {images.shape[0]} != label count {labels.shape[0]} "
            f"({images_path} vs {labels_path})"
        )
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    return Dataset(features, y, class_count=int(y.max()) + 1 if y.size else 0)


def blob_class_means(classes: int, dim: int) -> np.ndarray:
    """Class centers on a circle in the first two coordinates.

    The radius is chosen so the smallest pairwise distance is 2*sqrt(2),
    keeping classes linearly separable for spreads up to 0.5.
    """
    radius = math.sqrt(2.0) / math.sin(math.pi / classes)
    angles = 2.0 * math.pi * np.arange(classes) / classes
    means = np.zeros((classes, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def make_blobs(rng: Rng, classes: int, per_class: int, dim: int, spread: float) -> Dataset:
    """Synthetic Gaussian blob dataset with `classes * per_class` samples."""
    if classes < 2:
        raise InvalidInputError(f"classes must be >= 2, got {classes}")
    if per_class < 1:
        raise InvalidInputError(f"per_class must be >= 1, got {per_class}")
    if dim < 2:
        raise InvalidInputError(f"dim must be >= 2, got {dim}")
    if spread < 0:
        raise InvalidInputError(f"spread must be >= 0, got {spread}")
    gen = rng.generator
    means = blob_class_means(classes, dim)
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    features = means[labels] + gen.standard_normal((classes * per_class, dim)) * spread
    perm = gen.permutation(classes * per_class)
    return Dataset(features[perm], labels[perm], classes)


def save_blobs(dataset: Dataset, path) -> None:
    """Fixture format: magic, counts header, float64 features, int64 labels."""
    with open(path, "wb") as f:
        f.write(BLOB_MAGIC)
        f.write(struct.pack("<QQQ", len(dataset), dataset.features.shape[1], dataset.class_count))
        f.write(dataset.features.astype("<f8").tobytes())
        f.write(dataset.labels.astype("<i8").tobytes())


def load_blobs(path) -> Dataset:
    path = Path(path)
    with open(path, "rb") as f:
        magic = _read_exact(f, len(BLOB_MAGIC), path, "blob magic")
        if magic != BLOB_MAGIC:
            raise FormatError(f"{path}: blob magic {magic!r} != {BLOB_MAGIC!r}")
        n, d, c = struct.unpack("<QQQ", _read_exact(f, 24, path, "blob header"))
        features = np.frombuffer(_read_exact(f, n * d * 8, path, "blob features"), dtype="<f8")
        labels = np.frombuffer(_read_exact(f, n * 8, path, "blob labels"), dtype="<i8")
    return Dataset(features.reshape(n, d).copy(), labels.copy(), int(c))


def dirichlet_partition(dataset: Dataset, clients: int, beta: float, rng: Rng) -> Partition:
    """Split a dataset into per-client index shards.

    For every class a Dirichlet(beta * 1_clients) proportion vector decides
    how that class's (shuffled) indices are divided by cumulative shares.
    Empty shards are repaired by donating one sample from the largest shard.
    """
    if clients < 2:
        raise InvalidInputError(f"clients must be >= 2, got {clients}")
    if not beta > 0:
        raise InvalidInputError(f"beta must be positive, got {beta}")
    if len(dataset) < clients:
        raise InvalidInputError(f"dataset has {len(dataset)} samples for {clients} clients")

    shards: list[list[int]] = [[] for _ in range(clients)]
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size == 0:
            continue
        idx = rng.child("shuffle", c).generator.permutation(idx)
        props = sample_dirichlet(rng.child("class", c), beta, clients)
        cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
        for shard, piece in zip(shards, np.split(idx, cuts)):
            shard.extend(piece.tolist())

    sizes = [len(s) for s in shards]
    while min(sizes) == 0:
        donor = int(np.argmax(sizes))
        empty = sizes.index(0)
        shards[empty].append(shards[donor].pop())
        sizes = [len(s) for s in shards]

    return Partition(
        shards=tuple(np.array(sorted(s), dtype=np.int64) for s in shards),
        beta=float(beta),
        seed=rng.seed,
    )


def class_counts(dataset: Dataset, shard) -> np.ndarray:
    """Per-class sample counts of a shard (length class_count)."""
    shard = np.asarray(shard, dtype=np.int64)
    if shard.size == 0:
        return np.zeros(dataset.class_count, dtype=np.int64)
    if shard.min() < 0 or shard.max() >= len(dataset):
        raise InvalidInputError("shard contains out-of-range indices")
    return np.bincount(dataset.labels[shard], minlength=dataset.class_count)
