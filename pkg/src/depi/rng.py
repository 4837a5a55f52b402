"""Deterministic named random streams.

All randomness in the package flows from a single integer seed. Independent
consumers (scene texture, field perturbation, optimizer tie-breaking) draw
from named child streams so adding a consumer never shifts another one's
sequence.
"""

import zlib

import numpy as np


def named_stream(seed, name):
    """Return a np.random.Generator for the (seed, name) pair.

    The stream key is derived from a CRC of the name, so the mapping is
    stable across processes and platforms.
    """
    if not isinstance(name, str) or not name:
        raise ValueError("stream name must be a non-empty string")
    key = zlib.crc32(name.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(key,))
    return np.random.Generator(np.random.PCG64(ss))
