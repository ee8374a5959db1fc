"""Deterministic seed fan-out.

A single root seed is expanded into per-component seeds by hashing the root
together with a label path, so components stay reproducible independently of
the order in which they consume randomness.
"""

import hashlib

import numpy as np


def derive_seed(root: int, *labels) -> int:
    """Derive a 63-bit seed from a root seed and a label path."""
    h = hashlib.sha256()
    h.update(str(int(root)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little") >> 1


def derived_rng(root: int, *labels) -> np.random.Generator:
    """Generator seeded by `derive_seed(root, *labels)`."""
    return np.random.default_rng(derive_seed(root, *labels))
