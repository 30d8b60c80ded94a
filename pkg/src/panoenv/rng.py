"""Named random sub-streams derived from one integer seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("world", "train", "mask", "sample", "mix", "eval", "init")


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *extra)``.

    The name is hashed with CRC-32 so the mapping is stable across runs and
    platforms (``hash()`` is salted per process).
    """
    if seed < 0:
        raise ValueError("seed must be non-negative")
    key = (zlib.crc32(name.encode("utf-8")), *(int(e) for e in extra))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))
