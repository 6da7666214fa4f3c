"""Deterministic RNG streams derived from one master seed.

Every source of randomness in the package (parameter init, shuffling,
train/test splits, ...) pulls from a named stream so that re-running any
subset of the pipeline with the same master seed reproduces results
bit-for-bit.
"""

import hashlib

import numpy as np


def stream_seed(master_seed: int, name: str) -> int:
    """Derive a child seed from ``master_seed`` for the stream ``name``."""
    digest = hashlib.sha256(f"{master_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stream(master_seed: int, name: str) -> np.random.Generator:
    """A fresh, deterministic generator for the named stream."""
    return np.random.default_rng(stream_seed(master_seed, name))
