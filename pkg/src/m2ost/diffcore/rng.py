"""Counter-based random draws.

Every draw is keyed by ``(seed, *counter)`` through a Philox generator, so the
value of a mask depends only on where it is used, never on how many draws
happened before it.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def generator(seed: int, *counter) -> np.random.Generator:
    seq = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF,
                                 spawn_key=tuple(_key(c) for c in counter))
    return np.random.Generator(np.random.Philox(seq))


def bernoulli_mask(shape, drop_prob: float, seed: int, *counter) -> np.ndarray:
    """Boolean keep-mask: each entry is False with probability ``drop_prob``."""
    if not 0.0 <= drop_prob < 1.0:
        raise ValueError(f"drop probability must be in [0, 1), got {drop_prob}")
    return generator(seed, *counter).random(shape) >= drop_prob
