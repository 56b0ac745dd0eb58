"""Count-Min Sketch and Count Sketch over integer-keyed streams.

Hash rows are pairwise independent: (a*x + b) mod p mod width with a, b
drawn per row from a seeded generator and p a Mersenne prime.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

_PRIME = (1 << 31) - 1


@dataclass(frozen=True)
class SketchConfig:
    width: int = 2000
    depth: int = 5
    heavy_hitter_fraction: float = 0.001

    def __post_init__(self):
        if self.width < 1 or self.depth < 1:
            raise ConfigError("sketch width and depth must be >= 1")
        if not 0 < self.heavy_hitter_fraction < 1:
            raise ConfigError("heavy hitter fraction must lie in (0, 1)")


def _hash_params(rng: np.random.Generator, depth: int) -> tuple[np.ndarray, np.ndarray]:
    a = rng.integers(1, _PRIME, size=depth, dtype=np.int64)
    b = rng.integers(0, _PRIME, size=depth, dtype=np.int64)
    return a, b


def _buckets(a: np.ndarray, b: np.ndarray, keys: np.ndarray, width: int) -> np.ndarray:
    # (depth, n) bucket indices; keys reduced mod p first so products fit int64
    k = (keys.astype(np.int64) % _PRIME)[None, :]
    return ((a[:, None] * k + b[:, None]) % _PRIME) % width


class CountMinSketch:
    """Conservative counting: estimates never undershoot the true count."""

    def __init__(self, config: SketchConfig, rng: np.random.Generator):
        self.config = config
        self.table = np.zeros((config.depth, config.width), dtype=np.int64)
        self._a, self._b = _hash_params(rng, config.depth)

    def insert(self, keys) -> None:
        keys = np.asarray(keys, dtype=np.int64)
        rows = _buckets(self._a, self._b, keys, self.config.width)
        for d in range(self.config.depth):
            np.add.at(self.table[d], rows[d], 1)

    def query(self, keys) -> np.ndarray:
        keys = np.atleast_1d(np.asarray(keys, dtype=np.int64))
        rows = _buckets(self._a, self._b, keys, self.config.width)
        estimates = np.stack([self.table[d][rows[d]] for d in range(self.config.depth)])
        return estimates.min(axis=0)


class CountSketch:
    """Signed bucketing with a median-of-rows estimate; each row is unbiased."""

    def __init__(self, config: SketchConfig, rng: np.random.Generator):
        self.config = config
        self.table = np.zeros((config.depth, config.width), dtype=np.int64)
        self._a, self._b = _hash_params(rng, config.depth)
        self._sa, self._sb = _hash_params(rng, config.depth)

    def _signs(self, keys: np.ndarray) -> np.ndarray:
        k = (keys.astype(np.int64) % _PRIME)[None, :]
        bits = ((self._sa[:, None] * k + self._sb[:, None]) % _PRIME) & 1
        return 2 * bits - 1

    def insert(self, keys) -> None:
        keys = np.asarray(keys, dtype=np.int64)
        rows = _buckets(self._a, self._b, keys, self.config.width)
        signs = self._signs(keys)
        for d in range(self.config.depth):
            np.add.at(self.table[d], rows[d], signs[d])

    def row_estimates(self, keys) -> np.ndarray:
        """Per-row estimates, shape (depth, len(keys))."""
        keys = np.atleast_1d(np.asarray(keys, dtype=np.int64))
        rows = _buckets(self._a, self._b, keys, self.config.width)
        signs = self._signs(keys)
        return np.stack([signs[d] * self.table[d][rows[d]] for d in range(self.config.depth)])

    def query(self, keys) -> np.ndarray:
        return np.median(self.row_estimates(keys), axis=0)
