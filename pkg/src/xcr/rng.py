"""Counter-based random streams with hierarchical splitting.

Every draw is a pure function of ``(seed, stream, counter)``: replaying a
stream from the same state reproduces the same values on any platform.
Child streams obtained via :meth:`RngStream.split` use disjoint Philox keys,
so they never overlap their parent or siblings.
"""

from __future__ import annotations

import hashlib

import numpy as np
from numpy.random import Generator, Philox, SeedSequence
from scipy.special import ndtri

# Each draw call reserves its own 2**192-block slice of the Philox counter
# space, so consecutive calls can never reuse generator output.
_CALL_STRIDE = 1 << 192

_MASK64 = (1 << 64) - 1


def _label_to_int(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError(f"stream labels must be non-negative, got {label}")
        return int(label)
    if isinstance(label, str):
        digest = hashlib.sha256(label.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"stream label must be int or str, got {type(label).__name__}")


class RngStream:
    """A splittable, replayable source of random draws."""

    def __init__(self, seed: int, stream: tuple[int, ...] = (), counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = tuple(int(s) for s in stream)
        self.counter = int(counter)
        ss = SeedSequence(self.seed, spawn_key=self.stream)
        self._key = ss.generate_state(2, dtype=np.uint64)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream}, counter={self.counter})"

    def split(self, *labels) -> "RngStream":
        """Derive an independent child stream; labels may be ints or strings."""
        path = tuple(_label_to_int(lb) for lb in labels)
        return RngStream(self.seed, self.stream + path)

    def state(self) -> tuple[int, tuple[int, ...], int]:
        return self.seed, self.stream, self.counter

    def _generator(self) -> Generator:
        bg = Philox(key=self._key, counter=self.counter * _CALL_STRIDE)
        self.counter += 1
        return Generator(bg)

    def uniform(self, shape=()) -> np.ndarray:
        """Standard uniform draws on [0, 1)."""
        return self._generator().random(size=shape, dtype=np.float64)

    def normal(self, shape=()) -> np.ndarray:
        """Standard normal draws via the inverse CDF of clamped uniforms."""
        u = self._generator().random(size=shape, dtype=np.float64)
        tiny = np.finfo(np.float64).tiny
        return ndtri(np.clip(u, tiny, 1.0 - 1e-16))

    def poisson(self, lam: np.ndarray) -> np.ndarray:
        return self._generator().poisson(lam)

    def permutation(self, n: int) -> np.ndarray:
        """Uniformly random permutation of range(n)."""
        keys = self._generator().random(size=n, dtype=np.float64)
        return np.argsort(keys, kind="stable")

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._generator().integers(low, high, size=shape)


def derive_seed(seed: int, *labels) -> int:
    """A 64-bit seed deterministically derived from (seed, labels)."""
    path = tuple(_label_to_int(lb) for lb in labels)
    ss = SeedSequence(int(seed) & _MASK64, spawn_key=path)
    return int(ss.generate_state(1, dtype=np.uint64)[0])
