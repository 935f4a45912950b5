"""
Seed derivation helpers.
Every random stream is a pure function of (seed, tags).
"""

import numpy as np


def derive_seed(seed: int, *tags: int) -> int:
    """Derive an independent 63-bit seed from a base seed and integer tags."""
    state = np.random.SeedSequence([int(seed), *[int(t) for t in tags]]).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def rng_for(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *tags))


# Stream tags, so different consumers of one experiment seed never share draws
STREAM_TRAIN_DATA = 1
STREAM_TEST_DATA = 2
STREAM_SPLIT = 3
STREAM_BIASED_INIT = 4
STREAM_BIASED_BATCHES = 5
STREAM_DEBIASED_INIT = 6
STREAM_DEBIASED_BATCHES = 7
STREAM_AUGMENT = 8
STREAM_POPULATION = 9
STREAM_MONTE_CARLO = 10
