"""Deterministic, forkable random number generation.

All randomness in the package flows from a single 64-bit seed. Child streams
are derived by pure integer mixing of (parent seed, child index), so items
generated in parallel or out of order still get identical streams. The
underlying bit generator is numpy's PCG64, whose output is stable across
platforms for a fixed seed.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """One output of the splitmix64 generator seeded at ``x``.

    Used as the seed-mixing function: child seeds are
    ``splitmix64(parent_seed + (index + 1) * GOLDEN)``. Pure 64-bit integer
    arithmetic, identical on every platform.
    """
    z = (x + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class SeededRng:
    """A seeded random stream plus deterministic child derivation.

    Draws are delegated to ``self.gen`` (a ``numpy.random.Generator``).
    ``child(i)`` returns an independent stream that depends only on
    (seed, i), never on how much the parent has already drawn.
    """

    algorithm = "pcg64/splitmix64"

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, index: int) -> "SeededRng":
        if index < 0:
            raise ValueError("child index must be non-negative")
        return SeededRng(splitmix64((self.seed + (index + 1) * _GOLDEN) & _MASK64))

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed:#x})"
