"""Counter-based random streams.

A ``RandomSource`` wraps a Philox4x64 generator keyed by ``(seed, stream)``.
Philox output depends only on key and counter, so a given seed, stream and
call sequence reproduces the same draws on any platform.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, *path: int) -> int:
    """Deterministic 64-bit child seed for a path of integer ids."""
    ss = np.random.SeedSequence(entropy=int(seed) & _MASK64, spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class RandomSource:
    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = self.seed | (self.stream << 64)
        self._bitgen = np.random.Philox(key=key)
        self.gen = np.random.Generator(self._bitgen)

    def child(self, *path: int) -> "RandomSource":
        """Independent stream for a sub-task (sample id, step, ...)."""
        return RandomSource(derive_seed(self.seed, self.stream, *path), 0)

    def state_token(self) -> dict:
        """Opaque token identifying the current position in the stream."""
        st = self._bitgen.state["state"]
        return {
            "seed": self.seed,
            "stream": self.stream,
            "counter": [int(c) for c in st["counter"]],
            "buffer_pos": int(self._bitgen.state["buffer_pos"]),
        }

    # thin conveniences over the numpy Generator
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def random(self, size=None):
        return self.gen.random(size)

    def normal(self, size=None):
        return self.gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def __repr__(self) -> str:
        return f"RandomSource(seed={self.seed}, stream={self.stream})"
