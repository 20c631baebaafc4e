"""Counter-based random streams.

Every random draw in circuitse comes from a Philox generator whose key is (seed, index) and whose
counter starts at a per-purpose block. A stream is therefore a pure function of
(seed, index, purpose): no shared sequential state exists, so the draws of sample k are the
same whichever worker computes them and in whatever order.
"""

import enum

import numpy as np

_MASK64 = (1 << 64) - 1


class Purpose(enum.IntEnum):
    ASSIGN = 1  # device placement
    MEASUREMENT_NOISE = 2  # synthetic case generation
    DEGRADED = 3  # degraded RTU selection
    MC_MEASUREMENT = 4  # Monte Carlo measurement redraws
    MC_NETWORK = 5  # Monte Carlo branch parameter redraws
    SYNTHETIC_GRID = 6
    TRIAL_SEED = 7


def stream(seed: int, index: int, purpose: Purpose) -> np.random.Generator:
    """Independent generator for one (seed, index, purpose) triple."""
    key = np.array([seed & _MASK64, index & _MASK64], dtype=np.uint64)
    # counter blocks are 2^64 draws apart, far beyond what a single stream consumes
    counter = np.array([0, 0, 0, int(purpose)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def derive_seed(seed: int, index: int) -> int:
    """A 63-bit seed for trial `index` derived from a base seed."""
    return int(stream(seed, index, Purpose.TRIAL_SEED).integers(0, 2**63 - 1))
