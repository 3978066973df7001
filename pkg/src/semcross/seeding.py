"""Deterministic RNG stream derivation.

Every random draw in a run comes from a stream derived from the master
seed plus a structural address, never from a single shared generator.
That keeps initialization independent of parameter creation order (a
model variant with extra heads initializes the shared parameters
identically) and episode sampling independent of evaluation scheduling
(thread counts cannot reorder draws).

Addresses are spawn keys on numpy's SeedSequence:

- parameters:      (DOMAIN_PARAM, crc32(parameter name))
- train episodes:  (DOMAIN_TRAIN_EPISODE, global episode index)
- val episodes:    (DOMAIN_VAL_EPISODE, episode index)
- eval episodes:   (DOMAIN_EVAL_EPISODE, episode index)
"""

from __future__ import annotations

import zlib

import numpy as np

DOMAIN_PARAM = 0
DOMAIN_TRAIN_EPISODE = 1
DOMAIN_VAL_EPISODE = 2
DOMAIN_EVAL_EPISODE = 3


def named_rng(seed, name):
    """Generator keyed by (seed, name); the same name always gets the same stream."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(DOMAIN_PARAM, key)))


def indexed_rng(seed, domain, index):
    """Generator keyed by (seed, domain, index) for per-episode streams."""
    if index < 0:
        raise ValueError(f"stream index must be non-negative, got {index}")
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(domain, index)))
