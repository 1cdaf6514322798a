"""Seeded counter-based random streams."""
from __future__ import annotations

import numpy as np


def make_rng(seed: int | np.random.SeedSequence = 0) -> np.random.Generator:
    """Philox generator: 64-bit seeded, counter based, same seed -> same stream."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
    return np.random.Generator(np.random.Philox(ss))


def split(seed: int, n: int) -> list[np.random.Generator]:
    """n statistically independent child streams of one seed."""
    return [make_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(n)]
