"""Seeded random streams.

All randomness goes through :class:`Rng`, a thin wrapper over numpy's
Philox-4x64 counter-based bit generator (10 rounds). Philox output depends
only on (key, counter), so a given seed reproduces the same draws on every
platform and numpy release that keeps the ``Philox`` stream stable. The
64-bit seed is expanded into the Philox key with ``SeedSequence``; child
streams are derived by appending integer keys to the seed's entropy, so
``rng.spawn(3, 7)`` is independent of how many draws the parent made.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_2_53 = 2.0 ** 53


class Rng:
    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed) & _MASK64
        self.path = tuple(int(k) & _MASK64 for k in _path)
        ss = np.random.SeedSequence([self.seed, *self.path])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def spawn(self, *keys: int) -> "Rng":
        """Independent child stream addressed by ``keys``."""
        return Rng(self.seed, self.path + tuple(keys))

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    @property
    def counter(self) -> np.ndarray:
        return self._gen.bit_generator.state["state"]["counter"].copy()

    def normal(self, shape=(), dtype=np.float64) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=dtype)

    def uniform(self, shape=(), dtype=np.float64) -> np.ndarray:
        """Uniform draws in [0, 1)."""
        return self._gen.random(shape, dtype=dtype)

    def open_uniform(self, shape=()) -> np.ndarray:
        """Uniform float64 draws strictly inside (0, 1)."""
        k = self._gen.integers(0, 1 << 53, size=shape, dtype=np.int64)
        return (k.astype(np.float64) + 0.5) / _2_53

    def beta(self, a: float, b: float, shape=()) -> np.ndarray:
        return self._gen.beta(a, b, shape)

    def integers(self, low: int, high: int | None = None, shape=None) -> np.ndarray | int:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"
