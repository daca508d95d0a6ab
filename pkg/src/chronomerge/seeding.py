"""Deterministic derivation of RNG streams from a single experiment seed.

Every stochastic component (model init, batch order, replay draws, random
sparsification masks) pulls its generator from here, keyed by integer tags
and context indices, so a rerun with the same seed is bit-reproducible.
"""

from __future__ import annotations

import zlib

import numpy as np

# Stream tags: keep distinct so unrelated consumers never share a stream.
TAG_MODEL_INIT = 1
TAG_TRAIN = 2
TAG_MERGE = 3
TAG_STREAM = 4


def _as_int(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def derive_seed(*parts) -> int:
    """Collapse a tuple of ints/strings into one 32-bit seed."""
    entropy = [_as_int(p) for p in parts]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def derive_rng(*parts) -> np.random.Generator:
    """Generator seeded from a tuple of ints/strings."""
    entropy = [_as_int(p) for p in parts]
    return np.random.default_rng(np.random.SeedSequence(entropy))
