"""Named random streams derived from one 64-bit seed.

Each consumer asks for ``stream(seed, "purpose", ...)``; the names are
hashed into the seed sequence's spawn key, so adding a new consumer never
shifts the draws of an existing one.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, *names) -> np.random.Generator:
    key = tuple(zlib.crc32(str(n).encode("utf-8")) for n in names)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=key)))
