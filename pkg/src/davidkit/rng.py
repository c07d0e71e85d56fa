"""Splittable, counter-based random number generation.

Every stochastic routine in the package takes an explicit `Rng`. Children
are derived by hashing the parent key with a string tag, so a pipeline
stage can hand out independent, reproducible streams without coordinating
counters. The underlying bit generator is Philox (counter-based), which
produces identical streams across platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


class Rng:
    """Seeded random stream with deterministic, named splitting."""

    def __init__(self, seed: int | str):
        if isinstance(seed, str):
            seed = _hash_to_int(seed)
        self.seed = int(seed) & (2**64 - 1)
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def split(self, tag: str | int) -> "Rng":
        """Derive an independent child stream. Same (seed, tag) -> same child."""
        return Rng(_hash_to_int(f"{self.seed}/{tag}"))

    # Thin pass-throughs, so callers never touch the generator directly.
    def normal(self, loc=0.0, scale=1.0, size=None, dtype=np.float64):
        return self._gen.normal(loc, scale, size).astype(dtype, copy=False)

    def uniform(self, low=0.0, high=1.0, size=None, dtype=np.float64):
        return self._gen.uniform(low, high, size).astype(dtype, copy=False)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size, replace=True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


def _hash_to_int(text: str) -> int:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
