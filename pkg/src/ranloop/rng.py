"""Counter-keyed random streams.

Every draw is taken from a generator keyed by ``(seed, stream, index)``, so
the random numbers used at a given TTI depend only on the seed and the TTI
and never on how many draws happened before. Two copies of a state therefore
evolve identically without sharing any mutable generator.
"""
from __future__ import annotations

import enum

import numpy as np

_MASK64 = (1 << 64) - 1


class Stream(enum.IntEnum):
    PLACEMENT = 1
    SHADOWING = 2
    ARRIVALS = 3
    MOBILITY = 4
    HARQ = 5
    AGENT = 6


def keyed_generator(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(key=seed & _MASK64, counter=[index & _MASK64, int(stream), 0, 0])
    )

