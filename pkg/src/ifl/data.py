"""Dataset ingestion, non-IID partitioning and mini-batch sampling."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
NUM_CLASSES = 10

KMNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataError(ValueError):
    """Malformed or unusable dataset input."""


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (n, 1, rows, cols) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise DataError(f"labels must lie in [0, {NUM_CLASSES - 1}]")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, indices) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices])

    def head(self, n: int | None) -> "Dataset":
        if n is None or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n])


# ---------------------------------------------------------------- IDX format

def _read_header(data: bytes, magic: int, ndims: int) -> tuple[int, ...]:
    size = 4 * (1 + ndims)
    if len(data) < size:
        raise DataError(f"IDX header truncated: {len(data)} bytes, need {size}")
    got, *dims = struct.unpack(f">{1 + ndims}I", data[:size])
    if got != magic:
        raise DataError(f"bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    expected = size + int(np.prod(dims))
    if len(data) < expected:
        raise DataError(f"IDX payload truncated: {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise DataError(f"IDX has {len(data) - expected} trailing bytes")
    return tuple(dims)


def parse_idx_images(data: bytes) -> np.ndarray:
    """Parse an IDX3 image stream into a float32 ``(n, 1, rows, cols)`` array
    scaled to [0, 1]."""
    n, rows, cols = _read_header(data, IDX_IMAGES_MAGIC, 3)
    pixels = np.frombuffer(data, dtype=np.uint8, offset=16)
    return (pixels.reshape(n, 1, rows, cols) / np.float32(255.0)).astype(np.float32)


def parse_idx_labels(data: bytes) -> np.ndarray:
    (n,) = _read_header(data, IDX_LABELS_MAGIC, 1)
    labels = np.frombuffer(data, dtype=np.uint8, offset=8).astype(np.int64)
    if labels.size and labels.max() >= NUM_CLASSES:
        raise DataError(f"label {labels.max()} out of range for {NUM_CLASSES} classes")
    return labels


def idx_images_bytes(images: np.ndarray) -> bytes:
    """Inverse of :func:`parse_idx_images` (pixels rounded back to uint8)."""
    n, _, rows, cols = images.shape
    pixels = np.rint(np.asarray(images) * 255.0).clip(0, 255).astype(np.uint8)
    return struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + pixels.tobytes()


def idx_labels_bytes(labels) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">2I", IDX_LABELS_MAGIC, labels.size) + labels.tobytes()


def load_idx_dataset(images_path, labels_path) -> Dataset:
    images = parse_idx_images(Path(images_path).read_bytes())
    labels = parse_idx_labels(Path(labels_path).read_bytes())
    return Dataset(images, labels)


def load_kmnist(data_dir, split: str = "train") -> Dataset:
    """Load a KMNIST split from the four uncompressed IDX files in ``data_dir``."""
    img, lab = KMNIST_FILES[split]
    data_dir = Path(data_dir)
    for name in (img, lab):
        if not (data_dir / name).exists():
            raise DataError(f"missing {data_dir / name}")
    return load_idx_dataset(data_dir / img, data_dir / lab)


# ---------------------------------------------------------- synthetic images

def _prototypes(rng: np.random.Generator, blobs: int) -> np.ndarray:
    # per class: blob centres (row, col) and widths
    centres = rng.uniform(6.0, 22.0, size=(NUM_CLASSES, blobs, 2))
    widths = rng.uniform(1.8, 3.2, size=(NUM_CLASSES, blobs))
    return np.concatenate([centres, widths[..., None]], axis=-1)


def synthetic_dataset(n: int, rng: np.random.Generator, *, prototype_seed: int = 0,
                      blobs: int = 3, jitter: float = 1.5, noise: float = 0.15) -> Dataset:
    """Gaussian class blobs rendered into 28x28 images.

    Every class owns ``blobs`` Gaussian bumps at fixed positions (fixed by
    ``prototype_seed``, shared between train and test). Each sample shifts the
    bumps by ``jitter`` pixels, scales their amplitude and adds pixel noise, so
    the task is learnable but not linearly trivial.
    """
    protos = _prototypes(np.random.default_rng(prototype_seed), blobs)
    labels = rng.integers(0, NUM_CLASSES, size=n)
    p = protos[labels]  # (n, blobs, 3)
    centres = p[..., :2] + rng.normal(0.0, jitter, size=(n, blobs, 2))
    # a shared global shift makes position alone an unreliable cue
    centres += rng.normal(0.0, jitter, size=(n, 1, 2))
    width = p[..., 2] * rng.uniform(0.8, 1.25, size=(n, blobs))
    amp = rng.uniform(0.5, 1.0, size=(n, blobs))
    grid = np.arange(28, dtype=np.float64)
    dr = grid[None, None, :] - centres[..., 0:1]  # (n, blobs, 28)
    dc = grid[None, None, :] - centres[..., 1:2]
    inv = 1.0 / (2.0 * width[..., None] ** 2)
    gr = np.exp(-dr ** 2 * inv)
    gc = np.exp(-dc ** 2 * inv)
    img = np.einsum("nb,nbr,nbc->nrc", amp, gr, gc)
    img += rng.normal(0.0, noise, size=img.shape)
    # quantise exactly as an IDX file would be decoded
    pixels = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    images = (pixels[:, None] / np.float32(255.0)).astype(np.float32)
    return Dataset(images, labels.astype(np.int64))


# -------------------------------------------------------------- partitioning

def _largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short:
        # stable sort keeps ties deterministic (lowest client index first)
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(labels, n_clients: int, alpha: float, rng: np.random.Generator,
                        *, min_size: int = 1, max_retries: int = 100) -> list[np.ndarray]:
    """Split sample indices among clients with class-wise Dirichlet proportions.

    For each class, proportions ``p ~ Dir(alpha * 1)`` are drawn and the
    (shuffled) class indices are cut into integer counts by largest-remainder
    rounding. If any client ends up with fewer than ``min_size`` samples the
    whole draw is repeated, at most ``max_retries`` times.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    labels = np.asarray(labels)
    by_class = [np.flatnonzero(labels == c) for c in np.unique(labels)]
    for _ in range(max_retries):
        shards = [[] for _ in range(n_clients)]
        for idx in by_class:
            props = rng.dirichlet(np.full(n_clients, alpha))
            counts = _largest_remainder(len(idx), props)
            idx = rng.permutation(idx)
            for k, part in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
                shards[k].append(part)
        shards = [np.sort(np.concatenate(s)) if s else np.empty(0, np.int64) for s in shards]
        if min(len(s) for s in shards) >= min_size:
            return shards
    raise DataError(
        f"could not give every client >= {min_size} samples after {max_retries} draws "
        f"(alpha={alpha}, n_clients={n_clients})"
    )


class BatchSampler:
    """Shuffled fixed-size mini-batches over one client's index list.

    A partial batch at the end of an epoch is dropped; the next epoch starts
    with a fresh permutation drawn from the sampler's own generator.
    """

    def __init__(self, indices, batch_size: int, rng: np.random.Generator):
        self.indices = np.asarray(indices)
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if batch_size > len(self.indices):
            raise DataError(
                f"batch size {batch_size} exceeds shard size {len(self.indices)}"
            )
        self.batch_size = batch_size
        self.rng = rng
        self._order = self.rng.permutation(self.indices)
        self._cursor = 0

    def next_indices(self) -> np.ndarray:
        if self._cursor + self.batch_size > len(self._order):
            self._order = self.rng.permutation(self.indices)
            self._cursor = 0
        out = self._order[self._cursor:self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return out

    def next_batch(self, dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
        idx = self.next_indices()
        return dataset.images[idx], dataset.labels[idx]


def next_batch(sampler: BatchSampler, dataset: Dataset):
    return sampler.next_batch(dataset)
