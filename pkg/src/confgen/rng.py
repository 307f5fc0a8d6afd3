"""Named random streams derived from one 64-bit seed."""

import zlib

import numpy as np


def _key(name) -> int:
    if isinstance(name, (int, np.integer)) and name >= 0:
        return int(name)
    return zlib.crc32(str(name).encode())


def stream(seed: int, *names) -> np.random.Generator:
    """Independent generator for ``names`` under ``seed``; order of draws elsewhere is irrelevant."""
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    entropy = [seed & 0xFFFFFFFF, seed >> 32] + [_key(n) for n in names]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
