"""Named random streams derived from one integer seed."""

from __future__ import annotations

import zlib

import numpy as np


def _key(names) -> list[int]:
    return [zlib.crc32(str(n).encode()) for n in names]


def sub_seed(seed: int, *names) -> int:
    """63-bit seed for the stream ``names`` under ``seed``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *_key(names)])
    return int(ss.generate_state(2, dtype=np.uint32).astype(np.uint64) @ np.array([1, 1 << 32], dtype=np.uint64)) >> 1


def sub_rng(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *_key(names)]))
