"""Keyed random streams.

Every random draw in a run comes from ``stream(seed, purpose, *key)``. The
key pins a stream to one use site (say round ``t`` of client ``k``), so
results do not depend on call order or on how work is spread over threads.
"""

from __future__ import annotations

import numpy as np

DATA = 0
PARTITION = 1
PUBLIC = 2
INIT = 3
ASSIGN = 4
SAMPLE = 5
LOCAL = 6
SERVER = 7
SPLIT = 8


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def derive_seed(seed: int, *key: int) -> int:
    """A 64-bit integer seed for APIs that take plain ints."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
