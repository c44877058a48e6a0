"""Counter-based random streams on top of numpy's Philox generator."""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


class SeededRng:
    """A reproducible random stream.

    The Philox key is ``seed | stream << 64``, so every ``(seed, stream)``
    pair owns a disjoint, platform-independent sequence. Draws advance the
    internal counter; :meth:`state` / :meth:`set_state` capture it for
    checkpoints.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed | (self.stream << 64)))

    def spawn(self, stream: int) -> "SeededRng":
        """Child stream sharing the seed; independent of how far this one has advanced."""
        return SeededRng(self.seed, stream)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size=None, dtype=np.float64):
        return self._gen.standard_normal(size, dtype=dtype)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, p=None):
        return self._gen.choice(a, size=size, p=p)

    def state(self) -> dict:
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "stream": self.stream,
            "counter": [int(c) for c in st["state"]["counter"]],
            "buffer": [int(b) for b in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.stream = int(state["stream"])
        self._gen = np.random.Generator(np.random.Philox(key=self.seed | (self.stream << 64)))
        st = self._gen.bit_generator.state
        st["state"]["counter"] = np.array(state["counter"], dtype=np.uint64)
        st["buffer"] = np.array(state["buffer"], dtype=np.uint64)
        st["buffer_pos"] = state["buffer_pos"]
        st["has_uint32"] = state["has_uint32"]
        st["uinteger"] = state["uinteger"]
        self._gen.bit_generator.state = st

    @classmethod
    def from_state(cls, state: dict) -> "SeededRng":
        rng = cls(state["seed"], state["stream"])
        rng.set_state(state)
        return rng
