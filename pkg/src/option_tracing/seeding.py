"""Deterministic named sub-streams derived from one root seed.

Every source of randomness in the package (splits, parameter init, batch
shuffling, synthetic generation, k-means restarts) draws from a stream named
after its purpose, so changing one consumer never perturbs another.
"""

import hashlib

import numpy as np


def substream_seed(root_seed: int, name: str) -> int:
    """Derive a child seed from ``root_seed`` and a stream name."""
    digest = hashlib.sha256(f"{root_seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(root_seed: int, name: str) -> np.random.Generator:
    """Return a Generator seeded from the named sub-stream."""
    return np.random.default_rng(substream_seed(root_seed, name))
