"""Labeled RNG streams derived from one master seed.

Every consumer of randomness asks for its own stream by label (and optional
integer keys such as the round index), so adding or removing a consumer never
shifts the numbers another consumer sees.
"""
from __future__ import annotations

import zlib

import numpy as np


def _label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def stream(seed: int, label: str, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_label_key(label), *map(int, keys)))
    return np.random.default_rng(ss)


def substream_seed(seed: int, label: str, *keys: int) -> int:
    """A plain integer seed for APIs that want one (e.g. env.reset)."""
    return int(stream(seed, label, *keys).integers(0, 2**31 - 1))
