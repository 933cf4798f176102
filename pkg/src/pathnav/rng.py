"""Deterministic random-stream derivation.

All randomness in a run flows from a single integer seed. Independent
consumers (candidate sampling, baseline sampling, bootstrap, synthetic
generation) each derive a named substream so that adding a consumer never
perturbs the draws seen by another.
"""

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Return a generator for the substream `name` of the root `seed`.

    Uses a CRC of the name rather than hash() so streams are stable across
    interpreter runs.
    """
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, tag])))
