"""Counter-based SplitMix64 generator.

Every random draw in the package (shuffles, toy data, initialisation,
dropout, contrastive sampling) goes through this generator, so results are
bit-reproducible from the seed alone and independent of numpy's RNG
versioning.  Output ``k`` of a stream is ``mix(seed + k * GOLDEN)``, which lets
whole blocks be produced with vectorised uint64 arithmetic.
"""
from __future__ import annotations

import math

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next_u64(self, n: int | None = None):
        count = 1 if n is None else int(n)
        k = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = _mix(np.uint64(self.state) + k * GOLDEN)
        self.state = (self.state + count * int(GOLDEN)) & _MASK
        return int(z[0]) if n is None else z

    def spawn(self, tag: int = 0) -> "SplitMix64":
        """Independent child stream; the parent advances by one draw."""
        return SplitMix64(self.next_u64() ^ (int(tag) * 0xD1B54A32D192ED03 & _MASK))

    def random(self, n: int | None = None):
        """Uniform doubles in [0, 1) with 53 bits of precision."""
        z = self.next_u64(1 if n is None else n)
        u = (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return float(u[0]) if n is None else u

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        """Box-Muller normals, one pair of uniforms per output value."""
        size = int(np.prod(shape, dtype=np.int64))
        u = self.random(2 * size)
        u1 = 1.0 - u[0::2]  # (0, 1]
        u2 = u[1::2]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)
        return (std * z).reshape(shape)

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError("randbelow needs n >= 1")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            z = self.next_u64()
            if z < limit:
                return z % n

    def _bounded_block(self, bounds: np.ndarray) -> list[int]:
        """``randbelow(b)`` for each bound in order, drawn as one block.

        Equal to the sequential draws: if any draw would be rejected the
        stream is rewound and the scalar path is taken instead.
        """
        start = self.state
        z = self.next_u64(len(bounds))
        b = bounds.astype(np.uint64)
        with np.errstate(over="ignore"):
            limit = np.uint64(0) - ((np.uint64(0) - b) % b)  # 2^64 - (2^64 mod b), 0 when b | 2^64
        if np.any((limit != 0) & (z >= limit)):
            self.state = start
            return [self.randbelow(int(n)) for n in bounds]
        return (z % b).tolist()

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        n = len(items)
        if n < 2:
            return
        picks = self._bounded_block(np.arange(n, 1, -1))
        for i, j in zip(range(n - 1, 0, -1), picks):
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        order = list(range(n))
        self.shuffle(order)
        return order

    def derangement(self, n: int) -> list[int]:
        """Sattolo's algorithm: a uniformly random single n-cycle, so sigma(i) != i."""
        if n < 2:
            raise ValueError("no derangement exists for n < 2")
        order = list(range(n))
        picks = self._bounded_block(np.arange(n - 1, 0, -1))
        for i, j in zip(range(n - 1, 0, -1), picks):
            order[i], order[j] = order[j], order[i]
        return order
