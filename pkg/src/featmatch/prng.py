"""Counter-based SplitMix64 stream for platform-independent weight seeding.

The n-th draw (n >= 0) for a given seed is::

    z = (seed + (n + 1) * 0x9E3779B97F4A7C15) mod 2**64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2**64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) mod 2**64
    z =   z ^ (z >> 31)
    u = (z >> 11) * 2**-53          # uniform in [0, 1)

Every value is a pure function of (seed, n), so streams are reproducible
across platforms and independent of draw batching.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TO_UNIT = 2.0**-53


class SplitMix64:
    """Sequential view over the counter-based stream."""

    def __init__(self, seed: int):
        self.seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self.counter = 0

    def uniform(self, count: int) -> np.ndarray:
        """Next ``count`` uniform float64 values in [0, 1)."""
        n = np.arange(self.counter + 1, self.counter + count + 1, dtype=np.uint64)
        self.counter += count
        z = self.seed + n * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        z = z ^ (z >> np.uint64(31))
        return (z >> np.uint64(11)).astype(np.float64) * _TO_UNIT

    def symmetric(self, count: int) -> np.ndarray:
        """Next ``count`` values uniform in [-1, 1)."""
        return 2.0 * self.uniform(count) - 1.0
