"""Named random sub-streams derived from one master seed."""

import zlib

import numpy as np

STREAMS = ("env", "init", "explore", "replay", "eval")


def rng_stream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Philox generator keyed by (seed, name, index); independent of call order."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode()), int(index)])
    return np.random.Generator(np.random.Philox(ss))
