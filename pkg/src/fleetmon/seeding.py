"""Deterministic RNG derivation: every random stream is keyed, never ambient."""

from __future__ import annotations

import zlib

import numpy as np


def _key_int(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode())
    return int(key) & 0xFFFFFFFF


def seeded_rng(*keys) -> np.random.Generator:
    """Stable generator from a tuple of ints/strings; same keys, same stream."""
    if not keys:
        raise ValueError("at least one seed key required")
    seq = np.random.SeedSequence([_key_int(k) for k in keys])
    return np.random.Generator(np.random.PCG64(seq))
