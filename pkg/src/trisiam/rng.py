"""Deterministic 64-bit splitmix-style PRNG used for every random decision.

The generator is fixed so that shuffles, samples, and parameter
initialisations are reproducible across runs and reimplementable from this
description alone:

    state_{n+1} = (state_n + 0x9E3779B97F4A7C15) mod 2^64
    output_n    = mix64(state_{n+1})

    mix64(z): z ^= z >> 30; z *= 0xBF58476D1CE4E5B9 (mod 2^64)
              z ^= z >> 27; z *= 0x94D049BB133111EB (mod 2^64)
              z ^= z >> 31

Floats take the top 53 bits of an output word (uniform in [0, 1)).
Bounded integers use rejection sampling on the low-bias threshold
(2^64 - 2^64 mod n), then reduce modulo n, so draws are exactly uniform.
Shuffles are Fisher-Yates from the tail. Child seeds for subsystems are
derived as mix64(seed XOR fnv1a64(label)).
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def mix64(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def fnv1a64(label: str) -> int:
    h = _FNV_OFFSET
    for byte in label.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def derive_seed(seed: int, label: str) -> int:
    """Child seed for a named subsystem; one run seed feeds the whole run."""
    return mix64((seed & _MASK64) ^ fnv1a64(label))


class SplitMix64:
    """Scalar stream; the n-th output is mix64(seed + n * golden)."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK64
        return mix64(self.state)

    def next_float(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    def next_below(self, n: int) -> int:
        """Uniform integer in [0, n) via rejection sampling (no modulo bias)."""
        if n <= 0:
            raise ValueError(f"next_below requires n >= 1, got {n}")
        threshold = (1 << 64) - ((1 << 64) % n)
        while True:
            z = self.next_u64()
            if z < threshold:
                return z % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates from the tail."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_below(i + 1)
            items[i], items[j] = items[j], items[i]

    def choice(self, items):
        if not items:
            raise ValueError("choice on empty sequence")
        return items[self.next_below(len(items))]


def uniform_array(seed: int, n: int, lo: float, hi: float) -> np.ndarray:
    """Vectorised stream identical to SplitMix64(seed) mapped through
    next_float; returns float64 values in [lo, hi)."""
    idx = np.arange(1, n + 1, dtype=np.uint64)
    z = np.uint64(seed & _MASK64) + idx * np.uint64(_GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    z = z ^ (z >> np.uint64(31))
    floats = (z >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return lo + floats * (hi - lo)
