"""Named random streams derived from one master seed.

Every source of randomness in the simulator draws from its own substream so
that consuming one stream never shifts another (exploration schedules stay
paired across policies, for instance).
"""
from __future__ import annotations

import numpy as np

# Stream tags. Appending new tags is safe; renumbering breaks reproducibility.
PARTITION = 0
PROFILES = 1
EXPLORE = 2
DEVICE = 3
VALUATION = 4
SYNTHETIC = 5
LOCAL_TEST = 6


def substream(*entropy: int) -> np.random.Generator:
    """Generator for the stream identified by an integer path."""
    if not entropy:
        raise ValueError("substream needs at least the master seed")
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


def stream_seed(*entropy: int) -> int:
    """Stable integer seed for handing a substream to another component."""
    seq = np.random.SeedSequence(list(entropy))
    return int(seq.generate_state(1, dtype=np.uint64)[0])
