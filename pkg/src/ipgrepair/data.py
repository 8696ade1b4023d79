"""Dataset ingestion: MNIST IDX files and seeded synthetic stand-ins."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError, ConsistencyError, DataFormatError

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


@dataclass
class Dataset:
    X: np.ndarray  # (n, features), float64
    y: np.ndarray  # (n,), int

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx])


@dataclass
class DatasetSpec:
    kind: str  # mnist_idx | synthetic_blobs | synthetic_binary
    images: Optional[str] = None
    labels: Optional[str] = None
    num_samples: int = 1000
    dims: int = 784
    num_classes: int = 4
    separation: float = 1.0
    noise: float = 0.2
    density: float = 0.2  # blobs: fraction of features "on" in a class prototype
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("mnist_idx", "synthetic_blobs", "synthetic_binary"):
            raise ConfigurationError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "mnist_idx":
            if not self.images or not self.labels:
                raise ConfigurationError("mnist_idx needs images and labels paths")
        elif min(self.num_samples, self.dims, self.num_classes) < 1 or self.noise < 0:
            raise ConfigurationError("generator parameters must be positive")
        elif not 0 < self.density <= 1 or self.separation < 0:
            raise ConfigurationError("need 0 < density <= 1 and separation >= 0")
        if self.kind != "mnist_idx" and self.num_classes < 2:
            raise ConfigurationError("need at least two classes")


def _read_header(buf: bytes, path, magic: int, ndim: int):
    if len(buf) < 4 * (ndim + 1):
        raise DataFormatError(f"{path}: truncated IDX header")
    found = struct.unpack(">i", buf[:4])[0]
    if found != magic:
        raise DataFormatError(f"{path}: magic {found}, expected {magic}")
    return struct.unpack(">" + "i" * ndim, buf[4:4 * (ndim + 1)])


def read_idx_images(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    count, rows, cols = _read_header(buf, path, IMAGE_MAGIC, 3)
    body = np.frombuffer(buf, dtype=np.uint8, offset=16)
    if body.size != count * rows * cols:
        raise DataFormatError(
            f"{path}: expected {count * rows * cols} pixel bytes, found {body.size}"
        )
    return body.reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (count,) = _read_header(buf, path, LABEL_MAGIC, 1)
    body = np.frombuffer(buf, dtype=np.uint8, offset=8)
    if body.size != count:
        raise DataFormatError(f"{path}: expected {count} labels, found {body.size}")
    return body


def load_mnist_idx(images_path, labels_path) -> Dataset:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise ConsistencyError(
            f"{len(images)} images but {len(labels)} labels"
        )
    X = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(X, labels.astype(np.int64))


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">iiii", IMAGE_MAGIC, count, rows, cols) + images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">ii", LABEL_MAGIC, len(labels)) + labels.tobytes())


def gen_synthetic(spec: DatasetSpec) -> Dataset:
    """Seeded Gaussian blobs clipped to [0, 1]^d, or Bernoulli binary vectors.

    Blob prototypes are sparse like digit images: a ``density`` fraction of
    features sit at a level in [0.5, 1], the rest at -0.5 so that clipping
    leaves an exact-zero background. ``separation`` scales each class away
    from the shared centre (blobs) or from p = 0.5 (binary); 0 makes every
    class the same distribution.
    """
    if spec.kind == "mnist_idx":
        raise ConfigurationError("gen_synthetic only handles synthetic kinds")
    rng = np.random.default_rng(spec.seed)
    protos = rng.random((spec.num_classes, spec.dims))
    y = rng.integers(0, spec.num_classes, size=spec.num_samples)
    if spec.kind == "synthetic_blobs":
        on = rng.random((spec.num_classes, spec.dims)) < spec.density
        protos = np.where(on, 0.5 + 0.5 * protos, -0.5)
        centre = protos.mean(axis=0)
        means = centre + spec.separation * (protos - centre)
        X = means[y] + spec.noise * rng.standard_normal((spec.num_samples, spec.dims))
        X = np.clip(X, 0.0, 1.0)
    else:
        probs = 0.5 + np.clip(spec.separation, 0.0, 1.0) * (0.8 * protos - 0.4)
        X = (rng.random((spec.num_samples, spec.dims)) < probs[y]).astype(np.float64)
    return Dataset(X, y.astype(np.int64))


def load_dataset(spec: DatasetSpec) -> Dataset:
    if spec.kind == "mnist_idx":
        return load_mnist_idx(spec.images, spec.labels)
    return gen_synthetic(spec)


def split(ds: Dataset, fractions, seed=0):
    """Seeded shuffle split into consecutive parts with the given fractions."""
    fractions = list(fractions)
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError("split fractions must be non-negative and sum to 1")
    order = np.random.default_rng(seed).permutation(len(ds))
    bounds = np.round(np.cumsum([0.0] + fractions) * len(ds)).astype(int)
    return [ds.subset(order[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
