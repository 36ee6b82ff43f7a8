"""Portable 64-bit random streams for instance generation.

Seeding uses splitmix64; draws use xoshiro256**.  Both are defined
bit-exactly so that instances reproduce across languages:

    splitmix64(z):
        z += 0x9E3779B97F4A7C15
        z  = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
        z  = (z ^ (z >> 27)) * 0x94D049BB133111EB
        return z ^ (z >> 31)                  (all arithmetic mod 2**64)

    state s[0..3] = four successive splitmix64 outputs from the seed.

    next():
        result = rotl(s1 * 5, 7) * 9
        t = s1 << 17
        s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3
        s2 ^= t;  s3 = rotl(s3, 45)
        return result

    uniform()  = (next() >> 11) * 2**-53          in [0, 1)
    uniform(lo, hi) = lo + (hi - lo) * uniform()
    integers(lo, hi) = lo + floor(uniform() * (hi - lo + 1))   (inclusive)

``Xoshiro256`` advances many independent streams in lockstep, one per
column of a (4, m) uint64 state array; a single stream is the m = 1 case.
"""
from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(z: int) -> tuple[int, int]:
    """Return ``(output, next_state)`` of one splitmix64 step."""
    z = (z + _GOLDEN) & _MASK
    out = z
    out = ((out ^ (out >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    out = ((out ^ (out >> 27)) * 0x94D049BB133111EB) & _MASK
    return out ^ (out >> 31), z


def stream_seed(seed: int, *keys: int) -> int:
    """Derive a child seed from ``seed`` and integer keys (e.g. a pair (i, j))."""
    z = seed & _MASK
    for key in keys:
        out, _ = splitmix64(z ^ (key & _MASK))
        z = out
    return z


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


class Xoshiro256:
    """xoshiro256** over ``len(seeds)`` parallel streams."""

    def __init__(self, seeds):
        seeds = [int(s) & _MASK for s in np.atleast_1d(np.asarray(seeds, dtype=object))]
        state = np.empty((4, len(seeds)), dtype=np.uint64)
        for col, z in enumerate(seeds):
            for row in range(4):
                out, z = splitmix64(z)
                state[row, col] = out
        self._s = state

    @property
    def n_streams(self) -> int:
        return self._s.shape[1]

    def next_u64(self) -> np.ndarray:
        s = self._s
        with np.errstate(over="ignore"):
            result = _rotl(s[1] * np.uint64(5), 7) * np.uint64(9)
        t = s[1] << np.uint64(17)
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        u = (self.next_u64() >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return lo + (hi - lo) * u

    def integers(self, lo: int, hi: int) -> np.ndarray:
        return lo + np.floor(self.uniform() * (hi - lo + 1)).astype(np.int64)

    def uniform_block(self, count: int) -> np.ndarray:
        """``count`` successive uniforms per stream, shape (count, n_streams)."""
        out = np.empty((count, self.n_streams))
        for k in range(count):
            out[k] = self.uniform()
        return out


class Stream:
    """Scalar convenience wrapper around a single xoshiro stream."""

    def __init__(self, seed: int):
        self._g = Xoshiro256([seed])

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return float(self._g.uniform(lo, hi)[0])

    def integers(self, lo: int, hi: int) -> int:
        return int(self._g.integers(lo, hi)[0])

    def next_u64(self) -> int:
        return int(self._g.next_u64()[0])
