"""Named random sub-streams.

All randomness flows from one user seed; each component (voxelize, init,
sampler, dataset) derives its own stream by mixing the seed with a CRC32 of
the stream name, so components are independently reproducible.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream_seed(seed: int, name: str) -> int:
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))])
    return int(seq.generate_state(1)[0])


def substream_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(seed, name))
