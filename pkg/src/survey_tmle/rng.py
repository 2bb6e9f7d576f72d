"""Counter-based random streams keyed by (master seed, stream path).

Every replicate or sub-task derives its own Philox stream from the master
seed and an integer path, so results do not depend on execution order or on
how work is split across processes.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int, *path: int) -> np.random.Generator:
    """Independent Philox generator for ``(seed, *path)``."""
    ss = np.random.SeedSequence([int(seed), *map(int, path)])
    return np.random.Generator(np.random.Philox(ss))


def as_generator(random_state) -> np.random.Generator:
    if isinstance(random_state, np.random.Generator):
        return random_state
    if random_state is None:
        return np.random.default_rng()
    return make_rng(int(random_state))
