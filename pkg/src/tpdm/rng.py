"""Counter-based random streams.

Every draw is addressed by ``(seed, tag, step)`` and comes from a fresh
Philox generator keyed on that triple, so the values do not depend on how
many draws happened before or on how work is split across threads.
"""

from __future__ import annotations

import numpy as np

TAG_INIT = 1
TAG_PLAN = 2
TAG_PRIMARY = 3
TAG_AUXILIARY = 4
TAG_TRAIN = 5
TAG_PHANTOM = 6
TAG_MASK = 7
TAG_NOISE = 8
TAG_PARAMS = 9

_MASK64 = (1 << 64) - 1


def generator(seed: int, tag: int, counter: int = 0) -> np.random.Generator:
    if seed < 0 or counter < 0:
        raise ValueError("seed and counter must be non-negative")
    key = np.array([seed & _MASK64, ((tag & 0xFFFF) << 48) | (counter & ((1 << 48) - 1))], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def normal(seed: int, tag: int, counter: int, shape) -> np.ndarray:
    return generator(seed, tag, counter).standard_normal(shape)
