"""Reproducible random streams.

All Monte Carlo and permutation work is split into fixed-size blocks of
draws. Block ``k`` of a computation seeded with ``seed`` always receives
the Philox stream keyed by ``SeedSequence(seed, spawn_key=(*key, k))``,
so results do not depend on how many workers process the blocks or in
which order.
"""

from __future__ import annotations

import os

import numpy as np

#: Number of draws that share one counter-based stream.
BLOCK_SIZE = 1024

THREADS_ENV = "PSTEST_THREADS"


def block_generator(seed: int, block: int, key: tuple[int, ...] = ()) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(*key, block))
    return np.random.Generator(np.random.Philox(ss))


def blocks(total: int, size: int = BLOCK_SIZE) -> list[tuple[int, int, int]]:
    """Split ``total`` draws into ``(block_index, start, stop)`` triples."""
    return [(k, lo, min(lo + size, total)) for k, lo in enumerate(range(0, total, size))]


def child_seed(seed: int, *key: int) -> int:
    """Derive a 63-bit integer seed for an independent sub-computation."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(key))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def default_threads() -> int:
    value = os.environ.get(THREADS_ENV)
    if not value:
        return 1
    try:
        n = int(value)
    except ValueError:
        return 1
    return max(n, 1)
