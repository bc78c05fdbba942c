"""Seeded, counter-based random stream shared by sampling and training.

The raw stream is Philox-4x64 keyed by ``(seed, stream)``; every derived
variate (uniforms, Box-Muller normals, permutations, categorical draws) is
computed here from the raw 64-bit words, so results depend only on the seed,
the stream and the order of calls.
"""
from __future__ import annotations

import math

import numpy as np

_U64 = (1 << 64) - 1
_TWO_M53 = 2.0 ** -53


class RngState:
    """Mutable random stream; each draw advances it.

    Two states built with the same ``seed`` and ``stream`` produce the same
    sequence. Use :meth:`split` to hand independent streams to parallel work.
    """

    def __init__(self, seed=0, stream=0):
        seed = int(seed)
        stream = int(stream)
        if not (0 <= seed <= _U64 and 0 <= stream <= _U64):
            raise ValueError("seed and stream must be unsigned 64-bit integers")
        self.seed = seed
        self.stream = stream
        self.draws = 0
        self._bitgen = np.random.Philox(key=seed | (stream << 64))

    def __repr__(self):
        return f"RngState(seed={self.seed}, stream={self.stream}, draws={self.draws})"

    def split(self, stream):
        return RngState(self.seed, stream)

    def raw(self, size):
        size = int(size)
        self.draws += size
        if size == 0:
            return np.empty(0, dtype=np.uint64)
        return self._bitgen.random_raw(size)

    def uniform(self, size=None):
        """Doubles strictly inside (0, 1), 53 random bits each."""
        n = 1 if size is None else int(np.prod(size))
        u = ((self.raw(n) >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO_M53
        if size is None:
            return float(u[0])
        return u.reshape(size)

    def normal(self, size):
        """Standard normals by the Box-Muller transform."""
        n = int(np.prod(size))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        r = np.sqrt(-2.0 * np.log(u[0::2]))
        theta = (2.0 * math.pi) * u[1::2]
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(size)

    def permutation(self, n):
        return np.argsort(self.uniform(int(n)), kind="stable")

    def choice(self, n, k, replace=False):
        """``k`` indices from ``range(n)``."""
        if replace:
            return np.minimum((self.uniform(int(k)) * n).astype(np.int64), n - 1)
        if k > n:
            raise ValueError(f"cannot draw {k} of {n} without replacement")
        return self.permutation(n)[:k]

    def categorical(self, p, size):
        """Inverse-CDF draws from the (unnormalised, nonnegative) weights ``p``."""
        p = np.asarray(p, dtype=np.float64)
        cdf = np.cumsum(p)
        u = self.uniform(int(size)) * cdf[-1]
        idx = np.searchsorted(cdf, u, side="right")
        # u * total can round up to total; never land on a zero-weight tail
        return np.minimum(idx, np.flatnonzero(p > 0)[-1])


def as_rng(rng):
    if isinstance(rng, RngState):
        return rng
    if rng is None:
        return RngState(0)
    return RngState(int(rng))
