"""Text-modality side of the model: word vectors, soft targets, and the
auxiliary losses that compare predicted distributions to them.

A class label like "crossword_puzzle" is lowered and split on space,
underscore, and hyphen; the vectors of all in-table words are averaged
(order-independent), and the average is pushed through a softmax with the
target temperature. The result is a proper distribution over the word
vector dimensions, which is what KL needs on both sides.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, FormatError, MissingTokenError, ParameterError
from .tensor import Tensor

log = logging.getLogger(__name__)

_SPLIT = re.compile(r"[ _\-]+")


def normalize_label(label_text):
    """Lowercase and split a label into its component words."""
    return [w for w in _SPLIT.split(label_text.strip().lower()) if w]


@dataclass
class WordVectorTable:
    vectors: dict
    dim: int

    def __post_init__(self):
        if not self.vectors:
            raise FormatError("word vector table must not be empty")
        for token, vec in self.vectors.items():
            if vec.shape != (self.dim,):
                raise DimensionError(
                    f"vector for {token!r} has shape {vec.shape}, table dimension is {self.dim}"
                )

    def __len__(self):
        return len(self.vectors)

    def __contains__(self, token):
        return token in self.vectors

    def get(self, token):
        return self.vectors.get(token)


def load_word_vectors(path):
    """Parse a GloVe-format text file: one "token v1 ... vd" line per token.

    The first line fixes the dimension; every later line must match it.
    """
    vectors = {}
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split(" ")
            token = parts[0]
            values = parts[1:]
            if dim is None:
                if not values:
                    raise FormatError(f"{path}:{lineno}: no vector values on first line")
                dim = len(values)
            elif len(values) != dim:
                raise FormatError(
                    f"{path}:{lineno}: expected {dim} values for {token!r}, got {len(values)}"
                )
            try:
                vec = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
            vectors[token] = vec
    if dim is None:
        raise FormatError(f"{path}: empty word vector file")
    return WordVectorTable(vectors=vectors, dim=dim)


@dataclass
class SoftLabel:
    """A distribution over the word-vector dimensions plus its source text."""

    probs: np.ndarray
    label: str

    def __post_init__(self):
        total = float(self.probs.sum())
        if self.probs.min() < 0 or abs(total - 1.0) > 1e-6:
            raise ParameterError(
                f"soft label for {self.label!r} is not a distribution (sum {total})"
            )


def soft_target(label_text, table, tau_t=1.0):
    """Mean word vector of the label, softmax-normalized at temperature tau_t."""
    if tau_t <= 0:
        raise ParameterError(f"target temperature must be positive, got {tau_t}")
    words = normalize_label(label_text)
    found = []
    for w in words:
        vec = table.get(w)
        if vec is None:
            log.warning("label %r: word %r not in vector table, skipping", label_text, w)
        else:
            found.append(vec)
    if not found:
        raise MissingTokenError(
            f"no word of label {label_text!r} found in the vector table ({words})"
        )
    v = np.mean(found, axis=0)
    z = v / tau_t
    z = z - z.max()
    e = np.exp(z)
    return SoftLabel(probs=e / e.sum(), label=label_text)


def _dist_data(x):
    if isinstance(x, SoftLabel):
        return x.probs
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x)


def aux_loss(pred, target, kind="kl"):
    """Divergence between a predicted distribution and its soft target.

    ``pred`` may be a graph Tensor (rows are distributions over the last
    axis; leading axes average), so the same function serves both the
    training path and plain numeric evaluation. ``target`` is treated as a
    constant. Returns a scalar Tensor; use .item() for the value.

    kl:  sum_i t_i (log t_i - log p_i), logs floored at the engine epsilon
    mse: mean_i (p_i - t_i)^2
    """
    tdata = _dist_data(target)
    p = pred if isinstance(pred, Tensor) else Tensor(_dist_data(pred))
    if p.data.shape[-1] != tdata.shape[-1]:
        raise DimensionError(
            f"aux_loss: prediction dim {p.data.shape[-1]} != target dim {tdata.shape[-1]}"
        )
    try:
        np.broadcast_shapes(p.data.shape, tdata.shape)
    except ValueError:
        raise DimensionError(
            f"aux_loss: prediction shape {p.data.shape} does not line up with target {tdata.shape}"
        ) from None
    tconst = Tensor(np.asarray(tdata, dtype=p.data.dtype))

    if kind == "kl":
        # constant part sum t log t computed outside the graph
        tlogt = np.where(tdata > 0, tdata * np.log(np.maximum(tdata, T.LOG_EPS)), 0.0)
        entropy_term = float(np.broadcast_to(tlogt, np.broadcast_shapes(p.data.shape, tdata.shape)).sum(axis=-1).mean())
        cross = T.sum_(T.mul(tconst, T.log(p)), axis=-1)
        per_row = T.scale(cross, -1.0)
        loss = per_row if per_row.data.ndim == 0 else T.mean(per_row)
        return T.add(loss, Tensor(np.asarray(entropy_term, dtype=p.data.dtype)))
    if kind == "mse":
        diff = T.sub(p, tconst)
        sq = T.mul(diff, diff)
        per_row = T.mean(sq, axis=-1)
        return per_row if per_row.data.ndim == 0 else T.mean(per_row)
    raise ParameterError(f"unknown aux loss kind {kind!r}, expected 'kl' or 'mse'")
