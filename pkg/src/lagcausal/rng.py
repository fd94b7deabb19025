"""Seed derivation and generator construction.

Every random draw in the package goes through :func:`make_rng` with a seed
obtained from :func:`derive_seed`, so that a corpus seed plus an instance
index (plus a purpose tag) fully determines a stream.  PCG64 bit streams are
platform independent.
"""
from __future__ import annotations

import hashlib
import secrets

import numpy as np

SEED_MASK = (1 << 64) - 1


def derive_seed(base: int, *keys) -> int:
    """Hash a base seed and any number of keys into a new 64-bit seed.

    Keys are rendered with ``repr`` so ints and strings never collide
    (``1`` vs ``"1"``).
    """
    h = hashlib.blake2b(digest_size=8, person=b"lagcausal")
    h.update(str(int(base) & SEED_MASK).encode())
    for key in keys:
        h.update(b"\x1f")
        h.update(repr(key).encode())
    return int.from_bytes(h.digest(), "little")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & SEED_MASK))


def entropy_seed() -> int:
    return secrets.randbits(64)
