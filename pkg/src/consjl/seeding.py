"""
Seeded random substreams.

Every run seed fans out into independent streams so that, for instance,
switching the control strategy never perturbs the projection matrix drawn
for the same seed.
"""

from __future__ import annotations

from typing import Final

import numpy as np

STREAM_CONTROL: Final = 0
STREAM_MATRIX: Final = 1
STREAM_CONFIG: Final = 2

_MAX_SEED: Final = 2**64 - 1


def check_seed(seed: int) -> int:
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
        raise ValueError(f"seed must be an integer, got {type(seed).__name__}")
    if not 0 <= int(seed) <= _MAX_SEED:
        raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    return int(seed)


def substream(seed: int, stream: int, *path: int) -> np.random.SeedSequence:
    """Return the seed sequence of ``stream`` (and optional sub-path) under ``seed``."""
    return np.random.SeedSequence(check_seed(seed), spawn_key=(stream, *path))


def rng_for(seed: int, stream: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(substream(seed, stream, *path))
