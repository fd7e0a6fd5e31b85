"""Seeded random number generation.

Every generator in the package is a counter-based Philox stream. Child seeds are derived
from a root seed and a label path so a stage can be re-run on its own and still draw the
same numbers it drew inside a full run.
"""

import hashlib

import numpy as np

SEED_BITS = 63


def make_rng(seed):
    """Return a Philox-backed generator for `seed`."""
    return np.random.Generator(np.random.Philox(int(seed)))


def derive_seed(root, *labels):
    """Hash `root` and a label path into a non-negative 63-bit seed."""
    digest = hashlib.sha256(str(int(root)).encode("utf-8"))
    for label in labels:
        digest.update(b"/")
        digest.update(str(label).encode("utf-8"))
    return int.from_bytes(digest.digest()[:8], "big") >> (64 - SEED_BITS)


def child_rng(root, *labels):
    """Generator seeded from `derive_seed(root, *labels)`."""
    return make_rng(derive_seed(root, *labels))
