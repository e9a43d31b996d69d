"""Deterministic RNG derivation: one root seed, named independent streams."""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["derive_rng", "derive_seed"]


def derive_seed(root: int, *tags: str | int) -> np.random.SeedSequence:
    """Stable SeedSequence for (root, tags); string tags hash via crc32."""
    keys = [int(root) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, str):
            keys.append(zlib.crc32(tag.encode("utf-8")))
        else:
            keys.append(int(tag) & 0xFFFFFFFF)
    return np.random.SeedSequence(keys)


def derive_rng(root: int, *tags: str | int) -> np.random.Generator:
    """PCG64 generator for a named stream; bitwise-stable across runs."""
    return np.random.Generator(np.random.PCG64(derive_seed(root, *tags)))
