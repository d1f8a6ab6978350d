"""Named, counter-based random streams.

Every stochastic component draws from ``stream_rng(seed, name)`` so that a
run is fully determined by its seed and streams never alias across
components (data generation, init, batching, sampling noise).
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_rng(seed: int, name: str) -> np.random.Generator:
    """Philox generator keyed by (seed, crc32(name))."""
    key = zlib.crc32(name.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(key,))
    return np.random.Generator(np.random.Philox(seed=ss))
