"""Seed plumbing.

Every random draw in the package comes from a stream derived from one root
seed plus a path of names/integers, so that content never depends on the
order in which streams are consumed.
"""

import zlib

import numpy as np

MASK64 = (1 << 64) - 1


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    if part < 0:
        raise ValueError(f"negative stream key {part}")
    return int(part)


def derive_seed(seed, *path):
    """Deterministic 64-bit seed for the stream named by ``path`` under ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed) & MASK64, spawn_key=tuple(_key(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def philox(seed, *path):
    """Counter-based generator for one named stream."""
    ss = np.random.SeedSequence(entropy=int(seed) & MASK64, spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
