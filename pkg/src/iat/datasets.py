"""Deterministic datasets with stable per-example indices."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
UNIT_DOMAIN = (0.0, 1.0)


class DatasetError(ValueError):
    pass


class IdxFormatError(DatasetError):
    pass


class IdxTruncatedError(DatasetError):
    pass


class IdxCountMismatchError(DatasetError):
    pass


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    domain: tuple[float, float] | None = None

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.float32)
        y = np.ascontiguousarray(self.y, dtype=np.int64)
        if len(x) < 1 or len(x) != len(y):
            raise DatasetError(f"need N >= 1 examples with one label each, got {len(x)} and {len(y)}")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return len(self.x)

    @property
    def indices(self) -> np.ndarray:
        return np.arange(len(self.x))

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.x.shape[1:]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.num_classes, self.domain)


def two_moons(n: int, noise_sd: float = 0.1, seed: int = 0) -> Dataset:
    """Two interleaved unit half-circles; class 0 gets the extra point when n is odd."""
    if n < 2:
        raise DatasetError("two_moons needs n >= 2")
    rng = np.random.default_rng(seed)
    n1 = n // 2
    n0 = n - n1
    t0 = rng.uniform(0.0, np.pi, n0)
    t1 = rng.uniform(0.0, np.pi, n1)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([upper, lower])
    y = np.concatenate([np.zeros(n0, np.int64), np.ones(n1, np.int64)])
    if noise_sd > 0:
        x = x + rng.normal(0.0, noise_sd, x.shape)
    order = rng.permutation(n)
    return Dataset(x[order], y[order], 2, None)


def gaussian_blobs(n: int, centers, sd: float = 1.0, seed: int = 0) -> Dataset:
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or len(centers) < 2:
        raise DatasetError("gaussian_blobs needs at least two centers")
    k = len(centers)
    counts = [n // k + (1 if c < n % k else 0) for c in range(k)]
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(k), counts)
    x = centers[y] + (rng.normal(0.0, sd, (n, centers.shape[1])) if sd > 0 else 0.0)
    order = rng.permutation(n)
    return Dataset(x[order], y[order], k, None)


def _read_header(buf: bytes, path, expected_magic: int, kind: str):
    if len(buf) < 8:
        raise IdxTruncatedError(f"{path}: truncated header")
    magic, count = struct.unpack(">II", buf[:8])
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: magic {magic:#010x} is not an IDX {kind} file ({expected_magic:#010x})")
    return count


def read_idx_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    count = _read_header(buf, path, LABEL_MAGIC, "label")
    if len(buf) < 8 + count:
        raise IdxTruncatedError(f"{path}: expected {count} labels, file holds {len(buf) - 8}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=8).astype(np.int64)


def read_idx_images(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    count = _read_header(buf, path, IMAGE_MAGIC, "image")
    if len(buf) < 16:
        raise IdxTruncatedError(f"{path}: truncated dimension header")
    rows, cols = struct.unpack(">II", buf[8:16])
    size = count * rows * cols
    if len(buf) < 16 + size:
        raise IdxTruncatedError(f"{path}: expected {size} pixel bytes, file holds {len(buf) - 16}")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=size, offset=16)
    return pixels.reshape(count, rows, cols)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Images scaled to [0, 1] as value/255, shaped [N, 1, rows, cols]."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxCountMismatchError(f"{len(images)} images but {len(labels)} labels")
    x = images.astype(np.float32)[:, None] / np.float32(255)
    k = num_classes if num_classes is not None else max(int(labels.max()) + 1, 2)
    return Dataset(x, labels, k, UNIT_DOMAIN)


def write_idx_images(path, images) -> None:
    images = np.asarray(images)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise DatasetError("write_idx_images expects uint8 [N, rows, cols]")
    Path(path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, *images.shape) + images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.dtype != np.uint8:
        raise DatasetError("write_idx_labels expects uint8 [N]")
    Path(path).write_bytes(struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.tobytes())
