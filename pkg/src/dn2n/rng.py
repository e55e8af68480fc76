"""Named, counter-based random streams.

Every random draw in the package comes from ``stream(seed, purpose, *index)``,
a Philox generator keyed by the run seed, a stable hash of the purpose name
and integer indices (frame, epoch, transform, ...). Results therefore do not
depend on evaluation order or worker count.
"""
from __future__ import annotations

import zlib

import numpy as np


def purpose_id(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *index: int) -> np.random.Generator:
    key = [int(seed), purpose_id(purpose), *(int(i) for i in index)]
    if any(k < 0 for k in key):
        raise ValueError(f"stream keys must be non-negative, got {key}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
