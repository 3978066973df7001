"""Prototype metric head: class means, distances, posterior, and the
cross-entropy over query predictions.

All four operations run on graph Tensors so gradients flow back into the
embedding network. The distance function is pluggable by name; only
squared Euclidean ships, which keeps the posterior a softmax over
negative squared distances and the gradient smooth at zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, ParameterError
from .tensor import Tensor


@dataclass
class PrototypeSet:
    """One embedding per episode class, in episode class-index order."""

    protos: Tensor  # (K, D)
    class_order: tuple

    @property
    def k(self):
        return self.protos.data.shape[0]

    @property
    def dim(self):
        return self.protos.data.shape[1]


def compute_prototypes(support_embeddings, class_order=None):
    """Arithmetic mean over the support axis of a (K, N, D) tensor."""
    e = support_embeddings if isinstance(support_embeddings, Tensor) else Tensor(support_embeddings)
    if e.data.ndim != 3:
        raise DimensionError(f"support embeddings must be (K, N, D), got {e.shape}")
    K, N, D = e.data.shape
    if K < 2:
        raise ContractError(f"an episode needs at least 2 classes, got K={K}")
    if N < 1:
        raise ContractError("every class needs at least one support embedding")
    protos = T.mean(e, axis=1)
    if class_order is None:
        class_order = tuple(range(K))
    return PrototypeSet(protos=protos, class_order=tuple(class_order))


def _sq_euclidean(queries, protos):
    diff = T.sub(T.reshape(queries, (queries.data.shape[0], 1, queries.data.shape[1])), protos)
    return T.sum_(T.mul(diff, diff), axis=2)


_METRICS = {"euclidean_sq": _sq_euclidean}


def distances(query, protos, metric="euclidean_sq"):
    """d_k between each query and each prototype; (K,) for a single query,
    (M, K) for a batch of M."""
    if metric not in _METRICS:
        raise ParameterError(f"unknown metric {metric!r}, available: {sorted(_METRICS)}")
    q = query if isinstance(query, Tensor) else Tensor(query)
    p = protos.protos if isinstance(protos, PrototypeSet) else (
        protos if isinstance(protos, Tensor) else Tensor(protos)
    )
    single = q.data.ndim == 1
    if single:
        q = T.reshape(q, (1, q.data.shape[0]))
    if q.data.ndim != 2 or p.data.ndim != 2:
        raise DimensionError(f"distances: queries {q.shape} and prototypes {p.shape} must be 2-d")
    if q.data.shape[1] != p.data.shape[1]:
        raise DimensionError(
            f"distances: query dim {q.data.shape[1]} != prototype dim {p.data.shape[1]}"
        )
    d = _METRICS[metric](q, p)
    return T.reshape(d, (p.data.shape[0],)) if single else d


def posterior(d):
    """softmax(-d) along the class axis, max-shift stable."""
    dt = d if isinstance(d, Tensor) else Tensor(d)
    if not np.isfinite(dt.data).all():
        raise ParameterError("posterior: distances must be finite")
    return T.softmax(T.scale(dt, -1.0), axis=-1)


def classification_loss(posteriors, labels):
    """Mean over queries of -log p(true class); log floored at the engine
    epsilon so a confidently wrong posterior stays finite."""
    p = posteriors if isinstance(posteriors, Tensor) else Tensor(posteriors)
    if p.data.ndim != 2:
        raise DimensionError(f"posteriors must be (M, K), got {p.shape}")
    m, k = p.data.shape
    labels = np.asarray(labels)
    if labels.shape != (m,):
        raise DimensionError(f"labels shape {labels.shape} does not match {m} posterior rows")
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros((m, k), dtype=p.data.dtype)
    onehot[np.arange(m), labels] = 1.0
    picked = T.sum_(T.mul(T.log(p), Tensor(onehot)), axis=1)
    return T.scale(T.mean(picked), -1.0)
