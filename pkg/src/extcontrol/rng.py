"""Reproducible random streams.

Every stochastic step draws from a Philox (counter-based) generator keyed by
``(master seed, *keys)``. Streams with different keys are statistically
independent, and a given key always yields the same stream no matter which
thread or process asks for it.
"""

from __future__ import annotations

import numpy as np

__all__ = ["make_rng"]


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    if seed is None:
        raise ValueError("a seed is required for every stochastic step")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
