"""Differentiable kNN cache adapter and its mixing with the prompt-tuned head."""

from __future__ import annotations

import numpy as np

from .numerics import Tensor, matmul, softmax
from .retrieval import RetrievalDatabase


class AdapterState:
    """Cache keys (optionally learnable), one-hot labels, temperature and mix weight."""

    def __init__(
        self,
        keys,
        labels,
        n_classes: int,
        tau: float = 16.0,
        lam: float = 0.5,
        keys_frozen: bool = False,
        topk: int | None = None,
    ):
        keys = np.asarray(keys, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if keys.ndim != 2 or keys.shape[0] == 0:
            raise ValueError("adapter needs a non-empty key matrix")
        if tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        self.cache_keys = Tensor(keys.copy(), requires_grad=not keys_frozen)
        self.label_onehot = np.eye(n_classes)[labels]
        self.tau = float(tau)
        self.lam = float(lam)
        self.keys_frozen = keys_frozen
        self.topk = topk

    @classmethod
    def from_database(cls, db: RetrievalDatabase, **kw) -> "AdapterState":
        return cls(db.keys, db.labels, db.n_classes, **kw)

    @property
    def n_classes(self) -> int:
        return self.label_onehot.shape[1]


def knn_probability(adapter: AdapterState, z_hat) -> Tensor:
    """Class distribution from exp(tau * similarity) mass aggregated per label.

    Normalized over all cache entries (or the ``topk`` most similar when the
    cutoff is set).  ``z_hat`` is ``d`` or ``B x d``.
    """
    z = z_hat if isinstance(z_hat, Tensor) else Tensor(z_hat)
    keys = adapter.cache_keys
    if z.shape[-1] != keys.shape[1]:
        raise ValueError("query dimension does not match cache keys")
    single = z.ndim == 1
    if single:
        z = z.reshape(1, -1)
    logits = matmul(z, keys.T) * adapter.tau
    if adapter.topk is not None and adapter.topk < keys.shape[0]:
        # entries outside each row's top-k get zero mass
        order = np.argsort(-logits.data, axis=1, kind="stable")[:, adapter.topk :]
        mask = np.zeros_like(logits.data)
        np.put_along_axis(mask, order, -1e300, axis=1)
        logits = logits + mask
    p = matmul(softmax(logits, axis=-1), adapter.label_onehot)
    return p[0] if single else p


def interpolate(p_knn, p_prompt, lam: float) -> Tensor:
    """``lam * p_knn + (1 - lam) * p_prompt``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    a = p_knn if isinstance(p_knn, Tensor) else Tensor(p_knn)
    b = p_prompt if isinstance(p_prompt, Tensor) else Tensor(p_prompt)
    if a.shape != b.shape:
        raise ValueError("distributions must share a shape")
    if lam == 0.0:
        return b * 1.0
    if lam == 1.0:
        return a * 1.0
    return a * lam + b * (1.0 - lam)
