"""Seeded, splittable random streams.

Every random quantity in the package comes from a Philox counter-based
generator keyed by ``(seed, *spawn_key)``; two streams with different keys are
independent and a stream's output does not depend on how work is scheduled.
"""
from __future__ import annotations

import numpy as np


def stream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
