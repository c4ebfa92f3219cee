"""Portable, seedable random streams.

The stream is lane-parallel xoshiro256**: ``LANES`` independent xoshiro256**
states, filled in order from a splitmix64 sequence started at the seed
(lane 0 takes splitmix outputs 1-4, lane 1 outputs 5-8, ...). Each step
advances every lane once and emits the lane outputs in lane order, so the
stream is

    lane0.next(), lane1.next(), ..., lane63.next(), lane0.next(), ...

This is a fixed sequence for a given seed regardless of how draws are
chunked, and any implementation of the two published generators reproduces
it. Derived quantities:

* uniform double in [0, 1): ``(x >> 11) * 2**-53``
* normal: Box-Muller on consecutive uniform pairs (u1, u2), emitting
  ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`` then the matching ``sin`` value
* bounded integer in [0, n): ``floor(u * n)`` from one uniform
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
LANES = 64


def splitmix64_next(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new_state, output)."""
    state = (state + GOLDEN) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def derive_seed(*parts: int) -> int:
    """Fold integers into one 64-bit seed through splitmix64."""
    state = 0
    for part in parts:
        state, out = splitmix64_next((state ^ (part & MASK64)) & MASK64)
        state = out
    return state


def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


class Stream:
    """Buffered lane-parallel xoshiro256** stream."""

    def __init__(self, seed: int):
        sm = seed & MASK64
        words = []
        for _ in range(4 * LANES):
            sm, out = splitmix64_next(sm)
            words.append(out)
        s = np.array(words, dtype=np.uint64).reshape(LANES, 4)
        self._s = [s[:, i].copy() for i in range(4)]
        self._buf = np.empty(0, dtype=np.uint64)

    def _step(self) -> np.ndarray:
        s0, s1, s2, s3 = self._s
        result = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        self._s[3] = _rotl(s3, 45)
        return result

    def next_u64(self, n: int) -> np.ndarray:
        chunks = [self._buf]
        have = self._buf.size
        while have < n:
            block = self._step()
            chunks.append(block)
            have += block.size
        flat = np.concatenate(chunks)
        self._buf = flat[n:]
        return flat[:n]

    def uniform(self, n: int) -> np.ndarray:
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)[:n]

    def integers(self, low: int, high: int, n: int | None = None):
        """Integers in [low, high); a scalar when ``n`` is None."""
        k = 1 if n is None else n
        vals = low + np.floor(self.uniform(k) * (high - low)).astype(np.int64)
        return int(vals[0]) if n is None else vals

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n), swapping i with j in [0, i] for i = n-1 .. 1."""
        order = np.arange(n)
        if n < 2:
            return order
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            order[i], order[j] = order[j], order[i]
        return order
