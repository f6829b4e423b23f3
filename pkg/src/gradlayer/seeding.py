"""Per-purpose random streams derived from one u64 master seed.

Stream ``k`` is ``PCG64(SeedSequence(master, spawn_key=(k,)))``, so changing how
many draws one purpose makes never shifts another purpose's numbers.
"""

import numpy as np

DATA = 1
CRITIC_INIT = 2
BASE = 3          # fake seeds z ~ mu_g during critic training
REAL_INDEX = 4    # minibatch indices into the training set
EPSILON = 5       # interpolation weights for the penalty
EVAL = 6          # fixed evaluation particles
GENERATOR_INIT = 7
GENERATOR_NOISE = 8


def stream(master: int, purpose: int) -> np.random.Generator:
    master = int(master)
    if not 0 <= master < 2 ** 64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    ss = np.random.SeedSequence(master, spawn_key=(int(purpose),))
    return np.random.Generator(np.random.PCG64(ss))
