"""Deterministic random streams.

Every source of randomness in the library is a numpy Generator derived from a
64-bit seed plus an optional tuple of integer keys, so the same seed always
reproduces the same sample sequence (anchor choices, init, masking).
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed))


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """A stream keyed by (seed, k1, k2, ...); distinct keys give independent streams."""
    return np.random.default_rng([int(seed)] + [int(k) for k in keys])
