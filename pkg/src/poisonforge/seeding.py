"""Named random substreams derived from one master seed."""
from __future__ import annotations

import zlib

import numpy as np


def substream_seed(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))])


def substream(seed: int, name: str) -> np.random.Generator:
    """Return a generator that depends only on ``(seed, name)``.

    Stages ask for their own stream by name so that adding randomness to one
    stage never shifts the draws seen by another.
    """
    return np.random.default_rng(substream_seed(seed, name))


def child_seed(seed: int, name: str) -> int:
    """Derive a plain integer seed, for APIs that take ``int`` seeds."""
    return int(substream_seed(seed, name).generate_state(1, dtype=np.uint32)[0])
