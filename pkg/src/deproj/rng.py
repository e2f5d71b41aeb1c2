"""Seeded random streams, one independent stream per purpose.

Every stream is a numpy ``Generator`` over PCG64 whose SeedSequence is
keyed by ``(seed, purpose, *index)``. Keying by index (clip number, test
example, epoch) keeps results independent of evaluation order.
"""

import zlib

import numpy as np

PURPOSES = ("data", "split", "noise", "init", "train", "val", "eval", "augment", "probe")


def stream(seed: int, purpose: str, *index: int) -> np.random.Generator:
    if purpose not in PURPOSES:
        raise ValueError(f"unknown stream purpose {purpose!r}")
    key = (zlib.crc32(purpose.encode()),) + tuple(int(i) for i in index)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))
