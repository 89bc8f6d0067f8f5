"""Seeded counter-based random streams.

Each (seed, stream name) pair maps to its own Philox key, so data generation,
parameter initialisation and Gumbel noise never share state.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _key(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


class Rng:
    def __init__(self, seed: int, stream: str = "default"):
        self.seed = int(seed)
        self.stream = stream
        self._gen = np.random.Generator(np.random.Philox(key=_key(self.seed, stream)))

    def child(self, name: str) -> "Rng":
        """Independent stream derived from this one's seed and name."""
        return Rng(self.seed, f"{self.stream}/{name}")

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=tuple(shape))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=tuple(shape))

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, seq, size=None, replace=True):
        return self._gen.choice(seq, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self) -> float:
        return float(self._gen.random())
