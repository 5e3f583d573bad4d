"""Retrieval database of frozen features: build, persist, exact top-k search.

The database holds unit-norm keys and value embeddings plus a class label per
entry.  Search is an exact inner-product scan; with unit vectors that is
cosine similarity.  Ties are broken by ascending entry index so results are
reproducible by any exhaustive-scan oracle.
"""

from __future__ import annotations

import os
import struct
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import NORM_TOL, DegenerateInputError, Tensor, concat, matmul, softmax

MAGIC = b"RPDB"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIQI")


class DatabaseFormatError(ValueError):
    """Database file is malformed (bad magic, truncated, ...)."""


class DatabaseVersionError(DatabaseFormatError):
    pass


class FingerprintMismatchError(ValueError):
    """Database was built with a different frozen encoder."""


class FingerprintWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RetrievalHit:
    entry_index: int
    similarity: float


@dataclass
class RetrievalDatabase:
    keys: np.ndarray
    values: np.ndarray
    labels: np.ndarray
    n_classes: int
    fingerprint: int
    shots: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def __len__(self) -> int:
        return self.keys.shape[0]

    def check_fingerprint(self, fingerprint: int, strict: bool = True) -> None:
        if int(fingerprint) == int(self.fingerprint):
            return
        msg = (
            f"database fingerprint {self.fingerprint:#018x} does not match "
            f"encoder fingerprint {int(fingerprint):#018x}"
        )
        if strict:
            raise FingerprintMismatchError(msg)
        warnings.warn(msg, FingerprintWarning, stacklevel=3)


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms <= NORM_TOL).any():
        bad = int(np.flatnonzero(norms[:, 0] <= NORM_TOL)[0])
        raise DegenerateInputError(f"feature row {bad} has zero norm")
    return x / norms


def build_database(
    features,
    labels,
    n_classes: int | None = None,
    fingerprint: int = 0,
    shots: int | None = None,
    values=None,
) -> RetrievalDatabase:
    """Normalize ``features`` row-wise into keys; order is preserved.

    ``values`` defaults to the keys; pass separate value features for an
    external corpus.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ValueError("features must be a non-empty 2-D matrix")
    if features.shape[1] < 2:
        raise ValueError("feature dimension must be >= 2")
    if labels.shape != (features.shape[0],):
        raise ValueError("labels must have one entry per feature row")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    keys = _normalize_rows(features)
    vals = keys.copy() if values is None else _normalize_rows(np.asarray(values, dtype=np.float64))
    if vals.shape != keys.shape:
        raise ValueError("values must match the shape of features")
    if shots is None:
        counts = np.bincount(labels, minlength=n_classes)
        shots = int(counts.max()) if (counts == counts.max()).all() else 0
    return RetrievalDatabase(
        keys=keys,
        values=vals,
        labels=labels.astype(np.int64),
        n_classes=int(n_classes),
        fingerprint=int(fingerprint),
        shots=int(shots),
    )


def save_database(db: RetrievalDatabase, path) -> None:
    """Write ``db`` in the RPDB binary layout (float32 payload)."""
    n, d = db.keys.shape
    header = _HEADER.pack(MAGIC, VERSION, n, d, db.n_classes, db.fingerprint, db.shots)
    payload = b"".join(
        [
            header,
            np.ascontiguousarray(db.keys, dtype="<f4").tobytes(),
            np.ascontiguousarray(db.values, dtype="<f4").tobytes(),
            np.ascontiguousarray(db.labels, dtype="<u4").tobytes(),
        ]
    )
    _atomic_write(path, payload)


def load_database(path) -> RetrievalDatabase:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise DatabaseFormatError("truncated database header")
    magic, version, n, d, c, fp, shots = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DatabaseFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DatabaseVersionError(f"unsupported database version {version}")
    expected = _HEADER.size + 2 * n * d * 4 + n * 4
    if len(raw) != expected:
        raise DatabaseFormatError(f"database file has {len(raw)} bytes, expected {expected}")
    off = _HEADER.size
    keys = np.frombuffer(raw, "<f4", n * d, off).reshape(n, d).astype(np.float64)
    off += n * d * 4
    values = np.frombuffer(raw, "<f4", n * d, off).reshape(n, d).astype(np.float64)
    off += n * d * 4
    labels = np.frombuffer(raw, "<u4", n, off).astype(np.int64)
    if n and labels.max() >= c:
        raise DatabaseFormatError("label exceeds class count")
    return RetrievalDatabase(keys, values, labels, int(c), int(fp), int(shots))


def _atomic_write(path, payload: bytes) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def _ranked(sims: np.ndarray, k: int) -> np.ndarray:
    # lexsort: last key is primary -> similarity descending, then index ascending
    idx = np.arange(sims.shape[-1])
    return np.lexsort((idx, -sims))[:k]


def query_topk(
    db: RetrievalDatabase,
    query,
    k: int,
    exclude_index: int | None = None,
    fingerprint: int | None = None,
) -> list[RetrievalHit]:
    """Exact top-``k`` inner-product search for a single unit query."""
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (db.dim,):
        raise ValueError(f"query dimension {q.shape} does not match database dim {db.dim}")
    if fingerprint is not None:
        db.check_fingerprint(fingerprint, strict=False)
    avail = len(db) - (exclude_index is not None)
    if not 1 <= k <= avail:
        raise ValueError(f"k={k} out of range [1, {avail}]")
    sims = db.keys @ q
    if exclude_index is not None:
        sims = sims.copy()
        sims[exclude_index] = -np.inf
    order = _ranked(sims, k)
    return [RetrievalHit(int(i), float(sims[i])) for i in order]


def batch_topk(
    db: RetrievalDatabase, queries: np.ndarray, k: int, exclude: Sequence[int] | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`query_topk` returning ``(indices, similarities)`` arrays."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    sims = queries @ db.keys.T
    if exclude is not None:
        sims = sims.copy()
        for r, e in enumerate(exclude):
            if e is not None and e >= 0:
                sims[r, e] = -np.inf
    avail = len(db) - (exclude is not None and any(e is not None and e >= 0 for e in exclude))
    if not 1 <= k <= avail:
        raise ValueError(f"k={k} out of range [1, {avail}]")
    idx = np.stack([_ranked(row, k) for row in sims])
    return idx, np.take_along_axis(sims, idx, axis=1)


def fuse_retrieved(query, retrieved) -> Tensor:
    """Similarity-softmax convex combination of the retrieved vectors.

    Works on a single query (``d`` and ``k x d``) or a batch
    (``B x d`` and ``B x k x d``).
    """
    q = query if isinstance(query, Tensor) else Tensor(query)
    z = retrieved if isinstance(retrieved, Tensor) else Tensor(np.asarray(retrieved, dtype=float))
    if z.ndim < 2 or z.shape[-2] == 0:
        raise ValueError("fuse_retrieved needs at least one retrieved vector")
    if z.shape[-1] != q.shape[-1]:
        raise ValueError("retrieved vectors must match query dimension")
    sims = matmul(z, q.reshape(q.shape + (1,)))  # (..., k, 1)
    alpha = softmax(sims, axis=-2)
    return (alpha * z).sum(axis=-2)


def assemble_prompt_input(z_q, z_f, retrieved) -> Tensor:
    """Stack ``[z_q, z_f, z_1..z_k]`` as columns: ``d x (k + 2)``.

    Batched inputs (``B x d``, ``B x d``, ``B x k x d``) give ``B x d x (k + 2)``.
    """
    zq = z_q if isinstance(z_q, Tensor) else Tensor(z_q)
    zf = z_f if isinstance(z_f, Tensor) else Tensor(z_f)
    zr = retrieved if isinstance(retrieved, Tensor) else Tensor(np.asarray(retrieved, dtype=float))
    d = zq.shape[-1]
    if zf.shape[-1] != d or zr.shape[-1] != d:
        raise ValueError("assemble_prompt_input: dimension mismatch")
    lead = zq.shape[:-1]
    rows = concat([zq.reshape(lead + (1, d)), zf.reshape(lead + (1, d)), zr], axis=-2)
    return rows.transpose(*range(len(lead)), len(lead) + 1, len(lead))
