"""Seeded random streams.

Every random quantity in the package is drawn from a Philox (counter-based)
generator keyed by a root seed plus a tuple of integer/string tags, so that
independent blocks never share a stream and adding a new block does not
shift the others.
"""
from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK64
    digest = hashlib.blake2b(str(tag).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, *tags) -> np.random.Generator:
    """Return an independent generator for ``(seed, *tags)``."""
    entropy = [int(seed) & _MASK64] + [_tag_to_int(t) for t in tags]
    ss = np.random.SeedSequence(entropy)
    return np.random.Generator(np.random.Philox(ss))
