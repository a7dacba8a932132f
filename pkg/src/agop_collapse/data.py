"""Datasets, label encodings and centering.

Samples are stored column-wise: ``X`` has shape ``(d, N)`` and ``labels[i]``
is the class of column ``i``.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .linalg import as_matrix

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

ENCODINGS = ("zero-one", "pm-one")


class DataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    labels: np.ndarray
    K: int

    def __post_init__(self):
        X = as_matrix(self.X, "X")
        labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if labels.shape[0] != X.shape[1]:
            raise DataError(
                f"{labels.shape[0]} labels for {X.shape[1]} samples"
            )
        if labels.size and (labels.min() < 0 or labels.max() >= self.K):
            raise DataError(f"labels must lie in [0, {self.K})")
        X.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "labels", labels)

    @property
    def d(self) -> int:
        return self.X.shape[0]

    @property
    def N(self) -> int:
        return self.X.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.K)

    def sorted(self) -> "Dataset":
        """Class-major ordering; stable within each class."""
        order = np.argsort(self.labels, kind="stable")
        return Dataset(self.X[:, order], self.labels[order], self.K)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.X[:, idx], self.labels[idx], self.K)


@dataclass(frozen=True, eq=False)
class LabelMatrix:
    Y: np.ndarray
    encoding: str

    @property
    def K(self) -> int:
        return self.Y.shape[0]


def gen_gaussian_classes(
    K: int,
    n: int,
    d: int,
    separation: float = 1.0,
    noise: float = 0.05,
    seed: int = 0,
) -> Dataset:
    """Isotropic Gaussian blobs around orthogonal class means.

    The means are orthonormal directions scaled so that every pair sits at
    distance ``separation``. Samples come out sorted by class.
    """
    if K < 2 or n < 1 or d < 1:
        raise DataError(f"need K >= 2, n >= 1, d >= 1 (got K={K}, n={n}, d={d})")
    if separation <= 0:
        raise DataError("separation must be positive")
    if d < K:
        raise DataError(f"orthogonal class means need d >= K (got d={d}, K={K})")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((d, K)))
    means = q * (separation / np.sqrt(2.0))
    labels = np.repeat(np.arange(K), n)
    X = means[:, labels] + noise * rng.standard_normal((d, K * n))
    return Dataset(X, labels, K)


def class_means_of(ds_or_X, labels=None, K=None) -> np.ndarray:
    """Matrix of class means, shape ``(d, K)``; raises on an empty class."""
    if isinstance(ds_or_X, Dataset):
        X, labels, K = ds_or_X.X, ds_or_X.labels, ds_or_X.K
    else:
        X = np.asarray(ds_or_X, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        K = int(labels.max()) + 1 if K is None else K
    counts = np.bincount(labels, minlength=K)
    if np.any(counts == 0):
        raise DataError(f"class {int(np.flatnonzero(counts == 0)[0])} is empty")
    onehot = np.zeros((K, labels.size))
    onehot[labels, np.arange(labels.size)] = 1.0
    return (X @ onehot.T) / counts


def _open_idx(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    with _open_idx(path) as fh:
        raw = fh.read()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise DataError(f"{path}: truncated IDX payload ({len(raw) - header} of {size} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, limit: int | None = None) -> Dataset:
    """Read an IDX image/label pair (MNIST layout) into a Dataset.

    Pixels are scaled to ``[0, 1]`` and each image is flattened row-major.
    Gzipped files are accepted transparently.
    """
    images = _read_idx(Path(images_path), IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise DataError(
            f"{images.shape[0]} images in {images_path} but {labels.shape[0]} labels in {labels_path}"
        )
    if limit is not None:
        images = images[:limit]
        labels = labels[:limit]
    X = images.reshape(images.shape[0], -1).T.astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    K = int(labels.max()) + 1 if labels.size else 0
    return Dataset(X, labels, max(K, 1))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images ``(count, rows, cols)`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def encode_labels(ds: Dataset, encoding: str = "pm-one") -> LabelMatrix:
    """One-hot label matrix of shape ``(K, N)``.

    ``zero-one`` puts 1 on the true class and 0 elsewhere; ``pm-one`` uses
    +1 and -1.
    """
    if encoding not in ENCODINGS:
        raise DataError(f"unknown label encoding {encoding!r}")
    off = 0.0 if encoding == "zero-one" else -1.0
    Y = np.full((ds.K, ds.N), off)
    Y[ds.labels, np.arange(ds.N)] = 1.0
    return LabelMatrix(Y, encoding)


def global_mean(X, labels, K=None, mode: str = "class") -> np.ndarray:
    """Global mean used for centering.

    ``mode="class"`` averages the class means with equal weight, which keeps
    the between-class covariance consistent on imbalanced data;
    ``mode="sample"`` is the plain sample mean.
    """
    if mode == "class":
        return class_means_of(X, labels, K).mean(axis=1)
    if mode == "sample":
        return np.asarray(X, dtype=np.float64).mean(axis=1)
    raise DataError(f"unknown global-mean mode {mode!r}")


def center_global(X, labels, K=None, mode: str = "class"):
    """Subtract the global mean from every column; returns ``(Xc, mean)``."""
    X = as_matrix(X, "X")
    mu = global_mean(X, labels, K, mode)
    return X - mu[:, None], mu
