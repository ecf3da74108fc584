"""Counter-based random streams keyed by integers, independent of scheduling."""

from __future__ import annotations

import numpy as np


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Philox generator for the stream identified by ``(seed, *keys)``.

    Streams for different keys are statistically independent, so work split over
    threads or processes draws the same numbers regardless of execution order.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def chain_generator(seed: int) -> np.random.Generator:
    return substream(seed)
