"""Deterministic 64-bit pseudo-random streams.

Every random decision in the toolkit flows from a single user seed through
the counter-based splitmix64 sequence defined here, so corpora, mixtures
and training runs are bit-reproducible across machines and can be
re-derived by an independent implementation from this description alone:

  output(k) = mix64((seed + (k + 1) * GOLDEN) mod 2**64),  k = 0, 1, 2, ...

where GOLDEN = 0x9E3779B97F4A7C15 and mix64 is the splitmix64 finalizer
(xor-shift 30, * 0xBF58476D1CE4E5B9, xor-shift 27, * 0x94D049BB133111EB,
xor-shift 31). Child streams (one per mixture, per parameter tensor, ...)
use `derive(seed, index) = mix64(seed XOR mix64(index + GOLDEN))` as their
seed, which keeps parallel generation order-independent.
"""

from __future__ import annotations

import math

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(x: int) -> int:
    """splitmix64 finalizer on a 64-bit integer."""
    x &= _MASK
    x = ((x ^ (x >> 30)) * _M1) & _MASK
    x = ((x ^ (x >> 27)) * _M2) & _MASK
    return x ^ (x >> 31)


def derive(seed: int, index: int) -> int:
    """Seed for the `index`-th child stream of `seed`."""
    return mix64((seed & _MASK) ^ mix64((index + GOLDEN) & _MASK))


class Rng:
    """Counter-based splitmix64 stream with scalar and vectorized draws."""

    def __init__(self, seed: int):
        self._base = seed & _MASK
        self._count = 0

    def next_u64(self) -> int:
        z = mix64((self._base + (self._count + 1) * GOLDEN) & _MASK)
        self._count += 1
        return z

    def next_array(self, n: int) -> np.ndarray:
        """Next n raw draws as uint64, identical to n calls of next_u64."""
        ks = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        z = self._base + ks * np.uint64(GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
        return z ^ (z >> np.uint64(31))

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * (self.next_u64() / 2.0**64)

    def uniform_array(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        return lo + (hi - lo) * (self.next_array(n).astype(np.float64) / 2.0**64)

    def exponential(self, mean: float) -> float:
        """Inverse-CDF draw: -mean * ln(1 - u)."""
        return -mean * math.log1p(-self.next_u64() / 2.0**64)

    def normal_array(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller on consecutive uniform pairs."""
        m = (n + 1) // 2
        u = self.next_array(2 * m).astype(np.float64) / 2.0**64
        u1 = np.maximum(u[:m], 1e-300)
        u2 = u[m:]
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return out[:n]

    def randint(self, n: int) -> int:
        """Integer in [0, n). Modulo reduction; bias is < 2**-50 for n < 2**13."""
        if n <= 0:
            raise ValueError(f"randint bound must be positive, got {n}")
        return self.next_u64() % n

    def choice(self, seq):
        return seq[self.randint(len(seq))]

    def sample(self, seq, k: int) -> list:
        """k distinct elements, partial Fisher-Yates order."""
        if k > len(seq):
            raise ValueError(f"cannot sample {k} from {len(seq)} items")
        pool = list(seq)
        out = []
        for i in range(k):
            j = i + self.randint(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
            out.append(pool[i])
        return out

    def shuffle(self, seq: list) -> None:
        for i in range(len(seq) - 1, 0, -1):
            j = self.randint(i + 1)
            seq[i], seq[j] = seq[j], seq[i]
