"""Counter-based seed derivation.

A stage seed is the first 64-bit word of
`SeedSequence(master, spawn_key=(stage, counter))`, so any stage or replicate
can be re-run alone and still draw the same numbers.
"""
import numpy as np

# Fixed stage indices; never renumber, seeds of stored runs depend on them
STAGE_SYNTH = 0
STAGE_REWIRE = 1
STAGE_MATCHED_SAMPLE = 2
STAGE_PERMUTATION = 3
STAGE_SUBSAMPLE = 4


def derive_seed(master: int, stage: int, counter: int = 0) -> int:
    sequence = np.random.SeedSequence(master, spawn_key=(stage, counter))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def generator(master: int, stage: int, counter: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, stage, counter))
