"""xoshiro256** generator, seeded through splitmix64.

The bit stream is fixed by the algorithm, so identical seeds give identical
streams everywhere. Floats are built from the top 53 bits of each word.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step; returns (new_state, output)."""
    x = (x + _GOLDEN) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, z ^ (z >> 31)


@njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(cache=True)
def _fill_u64(state, out):
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    for i in range(out.shape[0]):
        out[i] = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3


class Rng:
    """Deterministic random source.

    One generator belongs to one worker; use :meth:`spawn` to derive
    independent children.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & _MASK64
        x = self.seed
        words = []
        for _ in range(4):
            x, z = splitmix64(x)
            words.append(z)
        self._state = np.array(words, dtype=np.uint64)

    @classmethod
    def from_state(cls, words) -> "Rng":
        rng = cls.__new__(cls)
        rng.seed = None
        rng._state = np.array([int(w) & _MASK64 for w in words], dtype=np.uint64)
        return rng

    def spawn(self, key: int) -> "Rng":
        """Child generator whose seed is splitmix64(seed ^ key * golden)."""
        base = self.seed if self.seed is not None else int(self._state[0])
        _, child = splitmix64(base ^ ((int(key) * _GOLDEN) & _MASK64))
        return Rng(child)

    def next_u64(self, size: int) -> np.ndarray:
        out = np.empty(int(size), dtype=np.uint64)
        _fill_u64(self._state, out)
        return out

    def random(self, size=None):
        """Uniform floats in [0, 1)."""
        n = 1 if size is None else int(np.prod(size))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return float(u[0]) if size is None else u.reshape(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return low + (high - low) * self.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        """Gaussian samples by the Box-Muller transform."""
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - self.random(m)  # (0, 1], keeps log finite
        u2 = self.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        z = loc + scale * z
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, high: int, size=None):
        """Integers in [0, high)."""
        u = self.random(1 if size is None else size)
        v = np.minimum(np.floor(u * high).astype(np.int64), high - 1)
        return int(v.ravel()[0]) if size is None else v

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.random(n - 1)
        for i in range(n - 1, 0, -1):
            j = min(int(u[n - 1 - i] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def unit_vectors(self, size: int) -> np.ndarray:
        v = self.normal(size=(size, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
