"""Seed derivation: one root seed fans out into named, independent streams."""

import hashlib

import numpy as np


def derive_seed(root_seed: int, *names) -> int:
    """Derive a child seed from a root seed and a path of stream names.

    Hash-based so that streams are independent and insertion of new streams
    never shifts existing ones.
    """
    h = hashlib.sha256()
    h.update(str(int(root_seed)).encode())
    for name in names:
        h.update(b"\x1f")
        h.update(str(name).encode())
    return int.from_bytes(h.digest()[:8], "little")


def rng_for(root_seed: int, *names) -> np.random.Generator:
    """Seeded numpy generator for the named stream."""
    return np.random.default_rng(derive_seed(root_seed, *names))
