"""Stable 64-bit seed derivation.

``derive_seed(master, name)`` mixes the master seed with an FNV-1a hash of
``name`` through one splitmix64 round, so every stage or per-item stream
gets an independent, reproducible seed.
"""

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


def derive_seed(master: int, *names) -> int:
    s = int(master) & MASK64
    for name in names:
        s = splitmix64(s ^ fnv1a64(str(name).encode("utf-8")))
    return s


def rng_for(master: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *names))
