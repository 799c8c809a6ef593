"""Seed plumbing: every random stream derives from one integer seed."""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for the named purpose (``"init"``, ``"crops"``, ...)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def substream_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(0, 2**31 - 1))
