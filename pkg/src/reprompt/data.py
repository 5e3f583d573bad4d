"""Synthetic few-shot suites, embedding/label files and intra-class variance."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .numerics import RngStream
from .retrieval import _atomic_write

EMB_MAGIC = b"RPEM"
LAB_MAGIC = b"RPLB"
FILE_VERSION = 1
PROTOCOL_SHOTS = (1, 2, 4, 8, 16)


class EmbeddingFormatError(ValueError):
    pass


@dataclass
class DatasetSpec:
    n_classes: int = 10
    shots: int = 16
    test_per_class: int = 200
    dim: int = 64
    sigma: float | tuple = 0.15
    shift: float = 0.0
    seed: int = 0
    patches: int = 0  # >0: emit S x d patch tokens per sample instead of one vector

    def validate(self) -> None:
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.n_classes < 1 or self.shots < 1 or self.test_per_class < 0:
            raise ValueError("class, shot and test counts must be positive")
        sig = np.broadcast_to(np.asarray(self.sigma, dtype=float), (self.n_classes,))
        if (sig < 0).any():
            raise ValueError("sigma must be >= 0")


@dataclass
class Dataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    n_classes: int


def _normalize_last(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def gen_synthetic(spec: DatasetSpec) -> Dataset:
    """Gaussian blobs around seeded unit-sphere class means, re-normalized.

    ``shift`` offsets the test means only (along one shared seeded direction),
    mimicking a target domain queried against a source database.
    """
    spec.validate()
    C, d = spec.n_classes, spec.dim
    rng = RngStream(spec.seed, stream_id=10)
    sigma = np.broadcast_to(np.asarray(spec.sigma, dtype=float), (C,))
    token_shape = (spec.patches, d) if spec.patches else (d,)
    means = _normalize_last(rng.normal((C,) + token_shape))
    direction = _normalize_last(rng.normal(token_shape))

    def draw(count: int, offset: float) -> tuple[np.ndarray, np.ndarray]:
        X = np.empty((C * count,) + token_shape)
        y = np.repeat(np.arange(C), count)
        for c in range(C):
            noise = rng.normal((count,) + token_shape, sigma[c])
            X[c * count : (c + 1) * count] = _normalize_last(means[c] + offset * direction + noise)
        return X, y

    X_train, y_train = draw(spec.shots, 0.0)
    X_test, y_test = draw(spec.test_per_class, spec.shift)
    return Dataset(X_train, y_train, X_test, y_test, C)


# ---------------------------------------------------------------------------
# binary files

_EMB_HEAD = struct.Struct("<4sIII")
_LAB_HEAD = struct.Struct("<4sIII")


def embedding_bytes(features) -> bytes:
    X = np.asarray(features, dtype=np.float64)
    X = X.reshape(X.shape[0], -1)
    return _EMB_HEAD.pack(EMB_MAGIC, FILE_VERSION, X.shape[0], X.shape[1]) + np.ascontiguousarray(
        X, dtype="<f4"
    ).tobytes()


def label_bytes(labels, n_classes: int) -> bytes:
    y = np.asarray(labels, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError("labels out of range")
    return _LAB_HEAD.pack(LAB_MAGIC, FILE_VERSION, y.size, n_classes) + y.astype("<u4").tobytes()


def write_embeddings(features, path) -> None:
    _atomic_write(path, embedding_bytes(features))


def write_labels(labels, n_classes: int, path) -> None:
    _atomic_write(path, label_bytes(labels, n_classes))


def read_embeddings(path) -> np.ndarray:
    raw = open(path, "rb").read()
    if len(raw) < _EMB_HEAD.size:
        raise EmbeddingFormatError("truncated embedding header")
    magic, version, count, dim = _EMB_HEAD.unpack_from(raw)
    if magic != EMB_MAGIC:
        raise EmbeddingFormatError(f"bad embedding magic {magic!r}")
    if version != FILE_VERSION:
        raise EmbeddingFormatError(f"unsupported embedding version {version}")
    need = _EMB_HEAD.size + count * dim * 4
    if len(raw) != need:
        raise EmbeddingFormatError(f"embedding file length {len(raw)} != expected {need}")
    return np.frombuffer(raw, "<f4", count * dim, _EMB_HEAD.size).reshape(count, dim).astype(
        np.float64
    )


def read_labels(path) -> tuple[np.ndarray, int]:
    raw = open(path, "rb").read()
    if len(raw) < _LAB_HEAD.size:
        raise EmbeddingFormatError("truncated label header")
    magic, version, count, n_classes = _LAB_HEAD.unpack_from(raw)
    if magic != LAB_MAGIC:
        raise EmbeddingFormatError(f"bad label magic {magic!r}")
    if version != FILE_VERSION:
        raise EmbeddingFormatError(f"unsupported label version {version}")
    need = _LAB_HEAD.size + count * 4
    if len(raw) != need:
        raise EmbeddingFormatError(f"label file length {len(raw)} != expected {need}")
    y = np.frombuffer(raw, "<u4", count, _LAB_HEAD.size).astype(np.int64)
    return y, int(n_classes)


def ingest_embeddings(features_path, labels_path, patches: int = 0) -> tuple[np.ndarray, np.ndarray, int]:
    """Load a feature/label file pair and validate it as a dataset.

    With ``patches > 0`` each row is reshaped to ``patches x dim``.
    """
    X = read_embeddings(features_path)
    y, C = read_labels(labels_path)
    if len(X) != len(y):
        raise EmbeddingFormatError(f"{len(X)} feature rows but {len(y)} labels")
    if y.size and y.max() >= C:
        raise EmbeddingFormatError(f"label {int(y.max())} >= declared class count {C}")
    present = np.unique(y)
    if not np.array_equal(present, np.arange(C)):
        raise EmbeddingFormatError("labels are not contiguous in [0, C)")
    if patches:
        if X.shape[1] % patches:
            raise EmbeddingFormatError("row width is not a multiple of the patch count")
        X = X.reshape(len(X), patches, X.shape[1] // patches)
    return X, y, C


# ---------------------------------------------------------------------------


def intra_class_variance(features, labels, n_classes: int | None = None):
    """Per-class elementwise variance, class-averaged vector and its scalar mean.

    Returns ``(per_class C x d, v_hat d, scalar)``.
    """
    Z = np.asarray(features, dtype=np.float64)
    Z = Z.reshape(len(Z), -1)
    y = np.asarray(labels, dtype=np.int64)
    C = int(y.max()) + 1 if n_classes is None else n_classes
    per_class = np.empty((C, Z.shape[1]))
    for c in range(C):
        Zc = Z[y == c]
        if len(Zc) == 0:
            raise ValueError(f"class {c} has no samples")
        per_class[c] = ((Zc - Zc.mean(axis=0)) ** 2).mean(axis=0)
    v_hat = per_class.mean(axis=0)
    return per_class, v_hat, float(v_hat.mean())
