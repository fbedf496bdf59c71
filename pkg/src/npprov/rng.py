"""Counter-based random streams keyed by integer tuples.

Every sampler in the package draws from ``stream(base_seed, index, purpose)``
so that task ``k`` of an epoch is the same no matter which worker makes it or
in what order.
"""
from __future__ import annotations

import numpy as np

# stream identifiers; values are part of the on-disk reproducibility contract
GP_VALUES = 1
TASK_SIZES = 2
TASK_POSITIONS = 3
SMARTMETER = 4
MASK = 5
INIT = 6
SHUFFLE = 7


def _words(key) -> list[int]:
    if isinstance(key, (int, np.integer)):
        key = (key,)
    words = []
    for k in key:
        k = int(k)
        if k < 0:
            raise ValueError(f"seed components must be nonnegative, got {k}")
        words.extend([k & 0xFFFFFFFF, (k >> 32) & 0xFFFFFFFF])
    return words


def stream(*key) -> np.random.Generator:
    """Philox generator keyed by ``key`` (ints, 64-bit each)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(_words(key))))
