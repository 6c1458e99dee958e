"""Datasets: IDX ingestion, the synthetic grating task, client partitioning."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ConfigError, CountMismatchError, DataFormatError, TruncatedFileError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] in [0, 1]
    labels: np.ndarray  # [N] ints
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be [N,C,H,W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.images)) or self.images.min(initial=0) < 0 or self.images.max(initial=0) > 1:
            raise DataFormatError("image values must be finite and inside [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


# -- IDX -------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedFileError(f"{what}: file shorter than the 4-byte magic")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{what}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{what}: header needs {header} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise TruncatedFileError(f"{what}: expected {size} payload bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx_dataset(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(images[:, None].astype(np.float64) / 255.0, labels.astype(np.int64), num_classes)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as an IDX file (images if 3-d, labels if 1-d)."""
    arr = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    header = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


# -- synthetic task --------------------------------------------------------

def synth_dataset(num_samples: int, num_classes: int = 10, image_shape=(1, 16, 16), seed: int = 0) -> Dataset:
    """Class-conditional gratings with per-sample phase, contrast, a random blob and pixel noise.

    The class fixes orientation and frequency, so it is learnable; the
    per-sample nuisances carry information a decoder has to recover from
    the activations, so inversion is non-trivial.
    """
    if num_samples < num_classes:
        raise ConfigError(f"need at least one sample per class ({num_samples} < {num_classes})")
    c, h, w = image_shape
    rng = np.random.default_rng(seed)
    labels = np.arange(num_samples) % num_classes
    yy, xx = np.meshgrid(np.linspace(0, 1, h, endpoint=False), np.linspace(0, 1, w, endpoint=False), indexing="ij")
    theta = np.pi * labels / num_classes
    freq = np.where(labels % 2 == 0, 1.5, 2.5)
    phase = rng.uniform(0, np.pi, num_samples)
    contrast = rng.uniform(0.2, 0.35, num_samples)
    offset = rng.uniform(0.4, 0.6, num_samples)
    u = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy
    grating = contrast[:, None, None] * np.sin(2 * np.pi * freq[:, None, None] * u + phase[:, None, None])
    by, bx = rng.uniform(0.15, 0.85, (2, num_samples))
    bs = rng.uniform(0.08, 0.16, num_samples)
    bamp = rng.uniform(-0.3, 0.3, num_samples)
    blob = bamp[:, None, None] * np.exp(-((yy - by[:, None, None]) ** 2 + (xx - bx[:, None, None]) ** 2)
                                        / (2 * bs[:, None, None] ** 2))
    base = offset[:, None, None] + grating + blob
    tint = rng.uniform(0.8, 1.2, (num_samples, c)) if c > 1 else np.ones((num_samples, 1))
    images = base[:, None] * tint[:, :, None, None] + rng.normal(0, 0.03, (num_samples, c, h, w))
    return Dataset(np.clip(images, 0.0, 1.0), labels, num_classes)


# -- splits ----------------------------------------------------------------

def partition_clients(dataset_or_size, num_clients: int, seed: int = 0) -> list[np.ndarray]:
    """Seeded shuffle, then split into ``num_clients`` disjoint shards whose sizes differ by at most one."""
    n = dataset_or_size if isinstance(dataset_or_size, (int, np.integer)) else len(dataset_or_size)
    if num_clients < 1:
        raise ConfigError(f"num_clients must be >= 1, got {num_clients}")
    if num_clients > n:
        raise ConfigError(f"cannot split {n} samples across {num_clients} clients")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(s) for s in np.array_split(perm, num_clients)]


def train_val_split(dataset: Dataset, val_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded train/validation split; the validation part doubles as the attacker's auxiliary set."""
    if not 0 < val_fraction < 1:
        raise ConfigError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return dataset.subset(np.sort(perm[n_val:])), dataset.subset(np.sort(perm[:n_val]))
