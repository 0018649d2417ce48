"""Deterministic derivation of independent RNG streams from a master seed."""
from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(master_seed: int, *coords) -> int:
    """63-bit seed from the master seed and arbitrary cell/config coordinates.

    Coordinates are hashed by their ``repr`` so strings, ints and floats all
    work and the mapping is stable across processes.
    """
    h = hashlib.sha256(repr((int(master_seed),) + tuple(coords)).encode()).digest()
    entropy = int.from_bytes(h[:16], "little")
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0] >> np.uint64(1))


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def numpy_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed))
