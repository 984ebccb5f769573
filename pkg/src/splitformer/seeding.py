"""Deterministic random streams.

Every stochastic component in this package draws from a counter-based
generator built here. Two calls with the same seed produce identical
streams on any platform, and independent components derive independent
streams by hashing a shared run seed together with a short purpose label,
so adding a new consumer never shifts the draws seen by existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def counter_rng(seed: int) -> np.random.Generator:
    """Return a Generator over the Philox counter-based bit stream."""
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must fit in uint64, got {seed}")
    return np.random.Generator(np.random.Philox(seed))


def derive_seed(seed: int, *labels: str | int) -> int:
    """Hash a run seed plus purpose labels down to a fresh uint64 seed."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(seed).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "little")


def derived_rng(seed: int, *labels: str | int) -> np.random.Generator:
    """Convenience: counter_rng over a derived seed."""
    return counter_rng(derive_seed(seed, *labels))


def hash_bytes(payload: bytes) -> int:
    """Stable uint64 digest of raw bytes, for content-addressed streams."""
    h = hashlib.blake2b(payload, digest_size=8)
    return int.from_bytes(h.digest(), "little")
