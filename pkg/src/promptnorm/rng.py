"""Counter-based random streams.

Each stream is a Philox generator whose key is derived from a tuple
``(seed, purpose, *counters)``. Two calls with the same tuple get the same
draws no matter which process or in which order they run, which is what lets
parallel sweeps reproduce serial ones.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *counters: int) -> np.random.Generator:
    """Independent generator keyed by ``(seed, purpose, *counters)``."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF, _tag(purpose)]
    words.extend(int(c) for c in counters)
    if any(w < 0 for w in words):
        raise ValueError(f"stream key words must be non-negative, got {words}")
    key = np.random.SeedSequence(words).generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
