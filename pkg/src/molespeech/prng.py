"""Deterministic randomness for the whole package.

Every stochastic choice (weight init, batch sampling, k-means seeding,
synthetic strings) draws from a Philox counter-based generator rooted at a
single config seed. Child streams are derived by hashing the parent seed
with a string tag, so adding a new consumer never perturbs existing ones.
Identical seeds reproduce identical runs within one build; bit-exactness
across numpy versions is not promised.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _derive(seed: int, tag: str) -> int:
    digest = hashlib.blake2s(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class Prng:
    """Philox-backed generator with named, independent child streams."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, tag: str) -> "Prng":
        return Prng(_derive(self.seed, tag))

    # Thin pass-throughs for the handful of draws the package uses.
    def normal(self, scale: float, shape) -> np.ndarray:
        return self.gen.normal(0.0, scale, size=shape)

    def uniform(self, shape) -> np.ndarray:
        return self.gen.random(size=shape)

    def integers(self, low: int, high: int, size=None):
        return self.gen.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = True, p=None) -> np.ndarray:
        return self.gen.choice(n, size=size, replace=replace, p=p)

    def shuffle(self, x) -> None:
        self.gen.shuffle(x)
