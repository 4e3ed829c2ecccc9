"""Named RNG substreams derived from a single root seed.

Every source of randomness in a run (parameter init, shuffling, dropout,
augmentation, synthetic data) draws from its own named stream, so enabling
or disabling one consumer never reshuffles the others.
"""

import zlib

import numpy as np

_MASK = (1 << 63) - 1


def substream(root_seed: int, name: str) -> np.random.Generator:
    """Return the deterministic generator for ``name`` under ``root_seed``."""
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(root_seed) & _MASK, tag]))
