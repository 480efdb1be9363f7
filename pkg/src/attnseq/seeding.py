"""Deterministic RNG derivation.

Every random stream in the package is a pure function of a root seed plus
a tuple of integer keys, so independent subsystems (model init, dataset
generation, per-clip noise, training shuffles) never share or race on a
generator.
"""

import numpy as np

# top-level stream ids
MODEL_INIT = 0
DATASET = 1
TRAINING = 2
GRADCHECK = 3

# dataset sub-streams
SAMPLE = 10
EPISODE = 11
CLASS_TABLE = 12
PATTERN = 13


def derive_rng(seed, *keys) -> np.random.Generator:
    """Generator for stream `keys` under root `seed`, independent of call order."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))
