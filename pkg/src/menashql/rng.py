"""Counter-based random streams.

Episode ``k`` of the run with seed ``seed`` draws from a Philox generator
keyed by the seed, with the episode number in the counter.  Any episode's
randomness is therefore a pure function of ``(seed, k)``: a resumed run only
needs the episode counter, and runs for different seeds never share draws.
"""

from __future__ import annotations

import numpy as np

SEED_MASK = (1 << 64) - 1


def episode_rng(seed: int, episode: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) & SEED_MASK,
                                                counter=[0, int(stream), int(episode), 0]))
