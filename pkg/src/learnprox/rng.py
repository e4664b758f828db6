"""Per-purpose random substreams.

Every random draw in the package comes from ``substream(seed, purpose, *idx)``:
a PCG64 generator keyed by ``SeedSequence([seed, purpose_code, *idx])``.
Draws for different purposes or indices never share state, so generation
order and parallelism cannot change any result.
"""
from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def substream(seed: int, purpose: str, *index: int) -> np.random.Generator:
    key = [int(seed) & _MASK64, purpose_code(purpose), *(int(i) for i in index)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
