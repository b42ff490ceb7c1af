"""Counter-based random numbers (Philox4x32-10), vectorized over counters.

Every draw is a pure function of (seed, stream, step, purpose), so results
do not depend on how trajectories are distributed over workers.
"""

from __future__ import annotations

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint32(0x9E3779B9)
_W1 = np.uint32(0xBB67AE85)
_LO = np.uint64(0xFFFFFFFF)
_SH = np.uint64(32)


def philox4x32(counter, key, rounds: int = 10) -> np.ndarray:
    """Philox4x32 block function.

    counter: uint32 array (..., 4); key: uint32 array (..., 2).
    Returns uint32 array (..., 4).
    """
    c = np.asarray(counter, dtype=np.uint32)
    k = np.asarray(key, dtype=np.uint32)
    c0, c1, c2, c3 = (c[..., i].astype(np.uint32) for i in range(4))
    k0 = np.broadcast_to(k[..., 0], c0.shape).astype(np.uint32)
    k1 = np.broadcast_to(k[..., 1], c0.shape).astype(np.uint32)
    with np.errstate(over="ignore"):
        for r in range(rounds):
            if r:
                k0 = k0 + _W0
                k1 = k1 + _W1
            p0 = _M0 * c0.astype(np.uint64)
            p1 = _M1 * c2.astype(np.uint64)
            hi0 = (p0 >> _SH).astype(np.uint32)
            lo0 = (p0 & _LO).astype(np.uint32)
            hi1 = (p1 >> _SH).astype(np.uint32)
            lo1 = (p1 & _LO).astype(np.uint32)
            c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return np.stack([c0, c1, c2, c3], axis=-1)


def _split64(x):
    x = np.asarray(x, dtype=np.uint64)
    return (x & _LO).astype(np.uint32), (x >> _SH).astype(np.uint32)


class CounterRNG:
    """Random variates addressed by (stream, step, purpose) under one seed."""

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        self.seed = seed
        lo, hi = _split64(np.uint64(seed))
        self._key = np.array([lo, hi], dtype=np.uint32)

    def bits(self, stream, step, purpose: int = 0) -> np.ndarray:
        """Four uint32 words per (stream, step); broadcasts its inputs."""
        stream, step = np.broadcast_arrays(np.asarray(stream, dtype=np.uint64), np.asarray(step, dtype=np.uint64))
        s_lo, s_hi = _split64(stream)
        ctr = np.stack([s_lo, s_hi, (step & _LO).astype(np.uint32),
                        np.full(stream.shape, purpose, dtype=np.uint32)], axis=-1)
        return philox4x32(ctr, self._key)

    def uniform(self, stream, step, purpose: int = 0) -> np.ndarray:
        """Two independent uniforms in [0, 1) with 53-bit resolution, shape (..., 2)."""
        w = self.bits(stream, step, purpose).astype(np.uint64)
        a = (w[..., 0] << _SH | w[..., 1]) >> np.uint64(11)
        b = (w[..., 2] << _SH | w[..., 3]) >> np.uint64(11)
        return np.stack([a, b], axis=-1).astype(float) * 2.0**-53

    def normal(self, stream, step, purpose: int = 0) -> np.ndarray:
        """Two independent standard normals (Box-Muller), shape (..., 2)."""
        u = self.uniform(stream, step, purpose)
        r = np.sqrt(-2.0 * np.log1p(-u[..., 0]))
        t = 2.0 * np.pi * u[..., 1]
        return np.stack([r * np.cos(t), r * np.sin(t)], axis=-1)

    def normals(self, stream, step, purpose: int, size: int) -> np.ndarray:
        """``size`` standard normals per stream, shape (..., size).

        Consumes ceil(size/2) consecutive sub-steps starting at step*2^16.
        """
        stream = np.asarray(stream, dtype=np.uint64)
        n = (size + 1) // 2
        sub = np.asarray(step, dtype=np.uint64) * np.uint64(1 << 16) + np.arange(n, dtype=np.uint64)
        z = self.normal(stream[..., None], sub, purpose)
        return z.reshape(stream.shape + (2 * n,))[..., :size]

    def stream(self, index: int) -> "Stream":
        return Stream(self, index)


class Stream:
    """A sequential view of one counter stream, for scalar call sites."""

    def __init__(self, rng: CounterRNG, index: int, purpose: int = 0):
        self.rng = rng
        self.index = int(index)
        self.purpose = purpose
        self.step = 0

    def random(self) -> float:
        u = self.rng.uniform(self.index, self.step, self.purpose)
        self.step += 1
        return float(u[0])

    def normal(self, size: int) -> np.ndarray:
        z = self.rng.normals(self.index, self.step, self.purpose, size)
        self.step += 1
        return z
