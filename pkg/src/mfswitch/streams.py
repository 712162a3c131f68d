"""Counter-based random streams derived from a single root seed.

Every random quantity in the library is drawn from a Philox generator whose
key is derived from ``(root seed, stream tag)`` and whose 256-bit counter is
started at ``(0, 0, scenario, particle)``.  Draws only advance the two low
counter words, so streams with different ``(scenario, particle)`` never
overlap, and the value of any draw does not depend on the order in which
streams are created or consumed.  That makes results independent of thread
scheduling.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

REGIME = 1
IDIOSYNCRATIC = 2
COMMON = 3
INITIAL = 4
AUXILIARY = 5


@lru_cache(maxsize=256)
def _key(seed: int, tag: int) -> tuple[int, int]:
    state = np.random.SeedSequence(int(seed), spawn_key=(int(tag),)).generate_state(2, np.uint64)
    return int(state[0]), int(state[1])


def stream(seed: int, tag: int, scenario: int = 0, particle: int = 0) -> np.random.Generator:
    """Generator for one ``(tag, scenario, particle)`` slot of the root seed."""
    if seed is None:
        raise ValueError("an explicit integer seed is required")
    key = np.array(_key(seed, tag), dtype=np.uint64)
    counter = np.array([0, 0, scenario, particle], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))
