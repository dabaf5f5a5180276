"""splitmix64-based seed derivation shared by every stochastic component."""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def mix64(seed: int, *keys: int) -> int:
    """Fold integer keys into a seed, one splitmix64 round per key."""
    out = int(seed) & _MASK64
    for key in keys:
        out = splitmix64(out ^ splitmix64(int(key) & _MASK64))
    return out


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(mix64(seed, *keys))
