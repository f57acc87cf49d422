"""Named random sub-streams derived from a single experiment seed."""

import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *extra)``; stable across runs."""
    key = (zlib.crc32(name.encode()), *extra)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))
