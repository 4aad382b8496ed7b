"""Counter-based pseudorandom function built on the SplitMix64 finalizer.

Every random quantity in the package is ``stream(key)[i]`` for an integer
counter ``i`` and a key derived from ``(seed, domain, *words)``:

    mix64(z):  z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
               z ^= z >> 27; z *= 0x94D049BB133111EB
               z ^= z >> 31                          (all mod 2**64)
    derive_key(seed, domain, w1..wn):
               h = mix64(seed ^ domain)
               h = mix64(h + GOLDEN + (w & MASK64))  for each word w
    raw(key, i)     = mix64(key + (i + 1) * GOLDEN)
    uniform(key, i) = ((raw >> 11) + 1) * 2**-53     in (0, 1]

with ``GOLDEN = 0x9E3779B97F4A7C15``. Signed words enter as 64-bit two's
complement. ``tests/test_prf.py`` pins reference vectors.
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_INV53 = 2.0 ** -53


def mix64(z: int) -> int:
    z &= MASK64
    z ^= z >> 30
    z = (z * _M1) & MASK64
    z ^= z >> 27
    z = (z * _M2) & MASK64
    return z ^ (z >> 31)


def derive_key(seed: int, domain: int, *words: int) -> int:
    h = mix64((seed ^ domain) & MASK64)
    for w in words:
        h = mix64(h + GOLDEN + (w & MASK64))
    return h


def raw(key: int, i: int) -> int:
    return mix64(key + (i + 1) * GOLDEN)


def uniform(key: int, i: int) -> float:
    return ((raw(key, i) >> 11) + 1) * _INV53


class Stream:
    """Sequential reader over one key; ``next_*`` advance a private counter."""

    __slots__ = ("key", "i")

    def __init__(self, key: int):
        self.key = key
        self.i = 0

    def next_raw(self) -> int:
        r = raw(self.key, self.i)
        self.i += 1
        return r

    def next_uniform(self) -> float:
        return ((self.next_raw() >> 11) + 1) * _INV53


def mix64_array(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64).copy()
    with np.errstate(over="ignore"):
        z ^= z >> np.uint64(30)
        z *= np.uint64(_M1)
        z ^= z >> np.uint64(27)
        z *= np.uint64(_M2)
        z ^= z >> np.uint64(31)
    return z


def uniforms(key: int, start: int, n: int) -> np.ndarray:
    """``uniform(key, i)`` for ``i = start .. start+n-1`` as a float array."""
    idx = np.arange(start + 1, start + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(key) + idx * np.uint64(GOLDEN)
    r = mix64_array(z)
    return ((r >> np.uint64(11)).astype(np.float64) + 1.0) * _INV53


def rng_from(seed: int, domain: int, *words: int) -> np.random.Generator:
    """numpy Generator keyed deterministically by ``(seed, domain, words)``.

    Used where bulk variates (Poisson counts, Beta radii) are needed; the Philox
    counter-based bit generator keeps the replay independent of call order.
    """
    key = derive_key(seed, domain, *words)
    return np.random.Generator(np.random.Philox(key=[key, derive_key(key, 0x51, len(words))]))
