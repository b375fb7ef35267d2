"""Deterministic seed derivation; no ambient global RNG anywhere."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *tags) -> int:
    """Stable 64-bit child seed from a parent seed and a tag path."""
    h = hashlib.sha256(repr((int(seed),) + tuple(tags)).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


def make_rng(seed: int, *tags) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *tags)))
