"""Deterministic counter-based random streams.

Every source of randomness in a run is an `Rng` keyed by (seed, stream id).
Streams are independent Philox generators, so per-sample seeds can be derived
in any order and still produce bit-identical draws.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["Rng", "stream_id"]

_MASK64 = (1 << 64) - 1


def stream_id(name: str) -> int:
    """Stable 64-bit stream id for a named stream ("init", "noise", ...)."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """Counter-based generator; (seed, stream) fully determines the draw sequence."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = seed & _MASK64
        self.stream = stream & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=(self.seed, self.stream)))

    def derive(self, name: str, index: int = 0) -> "Rng":
        """Child stream; order-independent, safe to create per sample."""
        child = (self.stream ^ stream_id(name) ^ ((index * 0x9E3779B97F4A7C15) & _MASK64)) & _MASK64
        return Rng(self.seed, child)

    def normal(self, shape, dtype=np.float32):
        return self._gen.standard_normal(shape, dtype=np.float64).astype(dtype, copy=False)

    def uniform(self, low, high, shape, dtype=np.float32):
        return self._gen.uniform(low, high, shape).astype(dtype, copy=False)

    def integers(self, low, high, shape=None):
        return self._gen.integers(low, high, size=shape)

    def poisson(self, lam):
        return self._gen.poisson(lam)

    def permutation(self, n: int):
        return self._gen.permutation(n)

    def choice(self, n: int) -> int:
        return int(self._gen.integers(0, n))
