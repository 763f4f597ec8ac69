"""Deterministic RNG stream derivation.

Every random draw in a run flows from a single integer seed. Each subsystem
(data generation, partitioning, batch shuffles, sampling strategies, sparsifier
coordinate draws, surrogate corruption) gets its own PCG64 stream keyed by a
purpose tag plus context integers, so adding draws to one subsystem never
perturbs any other. SeedSequence mixing is stable across platforms, unlike
Python's built-in hash().
"""

from __future__ import annotations

import numpy as np

DATA = 0
PARTITION = 1
INIT = 2
STRATEGY = 3
BATCHES = 4
COMPRESS = 5
SURROGATE = 6


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for the stream identified by (seed, *key)."""
    entropy = [int(seed)] + [int(k) for k in key]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
