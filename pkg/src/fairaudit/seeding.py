"""Splittable seed derivation.

Every RNG stream in the toolkit is keyed by a master seed plus a tuple of
non-negative integers (round index, model half, attempt, ...). The mix is
numpy's ``SeedSequence`` with the key tuple as ``spawn_key``: a counter-based
hash, so any stream can be recreated without replaying the others.
"""

import numpy as np


def derive_seed(master_seed: int, *key: int) -> int:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng_for(master_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key)))
