"""Deterministic, splittable random number generation.

Every stochastic component (parameter init, dropout, shuffling, synthetic
data) derives its generator from a single run seed plus a tuple of string/int
tags, so any part of a run can be reproduced in isolation and resuming a run
mid-way re-derives the exact same streams.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_to_int(tag: str | int) -> int:
    if isinstance(tag, int):
        return tag & 0xFFFFFFFF
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def derive_rng(seed: int, *tags: str | int) -> np.random.Generator:
    """Generator for the stream identified by (seed, *tags).

    The same (seed, tags) pair always yields the same stream, and distinct
    tag tuples yield independent streams.
    """
    key = tuple(_tag_to_int(t) for t in tags)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def derive_seed(seed: int, *tags: str | int) -> int:
    """A 32-bit child seed for code that wants an integer, not a Generator."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(_tag_to_int(t) for t in tags))
    return int(ss.generate_state(1, np.uint32)[0])
