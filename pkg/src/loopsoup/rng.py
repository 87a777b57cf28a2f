"""Counter-based random streams.

Every stream is a Philox generator keyed by a tuple of non-negative integers
(seed, *key).  Two calls with the same key return identical streams, and the
streams of different keys are statistically independent, so replicates can be
produced in any order or on any worker without changing the results.
"""
import numpy as np


def stream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in key]])
    return np.random.Generator(np.random.Philox(ss))


def as_generator(rng, *key) -> np.random.Generator:
    """Accept a Generator, an integer seed or None (seed 0)."""
    if isinstance(rng, np.random.Generator):
        return rng
    return stream(0 if rng is None else rng, *key)
