"""Deterministic seed derivation.

One experiment seed fans out into named sub-seeds (fold split, parameter
init, augmentation, permutation, ...) so that every random draw in a run is
reproducible bit-for-bit from a single u64.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *parts: int | str) -> int:
    """Derive a child seed from a master seed and a label path.

    Stable across processes and platforms: the derivation hashes the
    repr of the label tuple with SHA-256 and keeps the low 64 bits.
    """
    key = repr((int(master),) + tuple(parts)).encode("utf-8")
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(master: int, *parts: int | str) -> np.random.Generator:
    """A PCG64 generator seeded from ``derive_seed(master, *parts)``."""
    return np.random.Generator(np.random.PCG64(derive_seed(master, *parts)))
