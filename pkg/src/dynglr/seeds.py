"""Deterministic RNG substream derivation.

Every stochastic step in the package draws from a substream keyed by a base
seed plus a tuple of string/int tags, so reruns with the same manifest are
bit-for-bit reproducible and independent steps never share a stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def substream(seed: int, *tags) -> np.random.Generator:
    """Generator for the substream (seed, *tags); stable across platforms."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_to_int(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def substream_seed(seed: int, *tags) -> int:
    """64-bit integer seed for the substream, for APIs that take plain ints."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_to_int(t) for t in tags]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])
