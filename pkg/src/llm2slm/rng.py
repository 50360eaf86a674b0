"""Counter-based splitmix64 generator.

Every draw is a pure function of ``(seed, counter)``, so a block of ``n``
values is produced with vectorised uint64 arithmetic and runs are
bit-reproducible on one platform.
"""
from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO53 = float(1 << 53)


def splitmix64(seed: int, counters: np.ndarray) -> np.ndarray:
    """Mix ``seed + (counter + 1) * gamma`` for every counter (uint64 wraparound)."""
    with np.errstate(over="ignore"):
        z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + (counters.astype(np.uint64) + np.uint64(1)) * _GAMMA
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


class Rng:
    """Sequential stream over :func:`splitmix64`."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.counter = 0

    def bits(self, n: int) -> np.ndarray:
        out = splitmix64(self.seed, np.arange(self.counter, self.counter + n, dtype=np.uint64))
        self.counter += n
        return out

    def uniform(self, n: int | None = None):
        """Floats in [0, 1) with 53 bits of resolution."""
        k = 1 if n is None else n
        u = (self.bits(k) >> np.uint64(11)).astype(np.float64) / _TWO53
        return float(u[0]) if n is None else u

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        size = int(np.prod(shape, dtype=np.int64))
        half = (size + 1) // 2
        u1 = self.uniform(half)
        u2 = self.uniform(half)
        r = np.sqrt(-2.0 * np.log1p(-u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:size]
        return (z * std).reshape(shape)

    def integers(self, low: int, high: int, n: int | None = None):
        """Uniform ints in [low, high)."""
        k = 1 if n is None else n
        span = np.uint64(high - low)
        v = (self.bits(k) % span).astype(np.int64) + low
        return int(v[0]) if n is None else v

    def permutation(self, n: int) -> np.ndarray:
        # sort by random keys; ties are impossible in practice with 64-bit keys
        return np.argsort(self.bits(n), kind="stable")

    def categorical(self, probs: np.ndarray) -> int:
        """Inverse-CDF draw from a (possibly unnormalised) probability vector."""
        cdf = np.cumsum(probs, dtype=np.float64)
        u = self.uniform() * cdf[-1]
        idx = int(np.searchsorted(cdf, u, side="right"))
        return min(idx, len(probs) - 1)

    def spawn(self, tag: int) -> "Rng":
        """Independent child stream, keyed by ``tag``."""
        return Rng(int(splitmix64(self.seed, np.array([tag + (1 << 40)], dtype=np.uint64))[0]))
