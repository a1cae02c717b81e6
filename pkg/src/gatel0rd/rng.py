"""Seeded random streams.

A :class:`RngStream` wraps a PCG64 generator and counts draws. Child streams
are derived from ``(seed, key...)`` through ``numpy.random.SeedSequence`` so
that, e.g., episode ``i`` of a dataset gets the same stream no matter how
many episodes were generated before it.
"""
from __future__ import annotations

import numpy as np

ALGORITHM = "PCG64"


class RngStream:
    def __init__(self, seed: int = 0, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self.algorithm = ALGORITHM
        self.draws = 0
        seq = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, key={self.key}, draws={self.draws})"

    def derive(self, *key: int) -> "RngStream":
        """Independent child stream identified by ``key``; does not consume draws."""
        return RngStream(self.seed, self.key + tuple(key))

    def normal(self, loc=0.0, scale=1.0, size=None):
        self.draws += 1
        return self._gen.normal(loc, scale, size)

    def standard_normal(self, size=None):
        self.draws += 1
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        self.draws += 1
        return self._gen.uniform(low, high, size)

    def random(self, size=None):
        self.draws += 1
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        self.draws += 1
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        self.draws += 1
        return self._gen.permutation(n)


def as_stream(seed_or_stream) -> RngStream:
    if isinstance(seed_or_stream, RngStream):
        return seed_or_stream
    if seed_or_stream is None:
        return RngStream(0)
    return RngStream(int(seed_or_stream))
