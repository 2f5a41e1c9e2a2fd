"""Seeded green/red vocabulary partitions.

Everything here is bit-exact by construction: SplitMix64 drives a
descending-index Fisher-Yates shuffle, and bounded draws use top-bit
rejection so no modulo bias (or platform-dependent arithmetic) leaks in.
Detection re-derives the exact masks used during generation, so any change
to this file invalidates previously watermarked text.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ltw.errors import ConfigError

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

# Same default key as the reference KGW code.
DEFAULT_KEY = 15485863


def splitmix64_mix(x: int) -> int:
    """SplitMix64 finalizer applied to ``x + GOLDEN_GAMMA`` (mod 2**64)."""
    z = (x + GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """The SplitMix64 stream: output k is ``splitmix64_mix(seed + k * GOLDEN_GAMMA)``."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        out = splitmix64_mix(self.state)
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return out

    def bounded(self, n: int) -> int:
        """Uniform draw from ``[0, n)`` by rejection on the top bits."""
        if n < 1:
            raise ValueError("bound must be positive")
        if n == 1:
            return 0
        shift = 64 - (n - 1).bit_length()
        while True:
            x = self.next_u64() >> shift
            if x < n:
                return x


class HashKind(enum.Enum):
    CONTEXT = "context"  # LTW-1, KGW-style: seed depends on the previous token
    FIXED = "fixed"  # LTW-0, Unigram-style: one partition for every position


@dataclass(frozen=True)
class HashScheme:
    kind: HashKind = HashKind.CONTEXT
    key: int = DEFAULT_KEY

    def __post_init__(self):
        if not 0 <= self.key <= MASK64:
            raise ConfigError(f"hash key must fit in 64 bits, got {self.key}")

    @classmethod
    def parse(cls, kind: str, key: int = DEFAULT_KEY) -> "HashScheme":
        try:
            return cls(HashKind(kind.lower()), key)
        except ValueError:
            raise ConfigError(f"unknown hash scheme {kind!r}; expected 'context' or 'fixed'") from None


def derive_seed(scheme: HashScheme, prev_token: int | None) -> int:
    """Per-step shuffle seed.

    The previous token is offset by one before mixing so token 0 does not
    pass the key through unchanged.
    """
    if scheme.kind is HashKind.FIXED:
        return scheme.key
    if prev_token is None or prev_token < 0:
        raise ValueError("context hashing needs a previous token id")
    return splitmix64_mix(scheme.key ^ (prev_token + 1))


def green_count(vocab_size: int, gamma: float) -> int:
    if not 0.0 < gamma < 1.0:
        raise ConfigError(f"gamma must lie in (0, 1), got {gamma}")
    if vocab_size < 2:
        raise ConfigError(f"vocabulary too small for a partition: {vocab_size}")
    n = math.floor(gamma * vocab_size)
    if n < 1 or n >= vocab_size:
        raise ConfigError(f"gamma={gamma} gives a degenerate green list of {n}/{vocab_size} tokens")
    return n


def permutation(vocab_size: int, seed: int) -> list[int]:
    perm = list(range(vocab_size))
    rng = SplitMix64(seed)
    for i in range(vocab_size - 1, 0, -1):
        j = rng.bounded(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


@dataclass(frozen=True, eq=False)
class GreenMask:
    bits: np.ndarray  # bool, length |V|, read-only
    green_count: int

    def __eq__(self, other):
        if not isinstance(other, GreenMask):
            return NotImplemented
        return self.green_count == other.green_count and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash(self.bits.tobytes())

    def __contains__(self, token: int) -> bool:
        return bool(self.bits[token])

    @property
    def ids(self) -> np.ndarray:
        return np.flatnonzero(self.bits)


@lru_cache(maxsize=8192)
def green_mask(vocab_size: int, gamma: float, seed: int) -> GreenMask:
    """The first ``floor(gamma * |V|)`` entries of the seeded permutation are green.

    Cached: a context-hashed generation only ever sees ``|V|`` distinct seeds.
    """
    n = green_count(vocab_size, gamma)
    perm = permutation(vocab_size, seed)
    bits = np.zeros(vocab_size, dtype=bool)
    bits[perm[:n]] = True
    bits.flags.writeable = False
    return GreenMask(bits, n)


def mask_for_step(scheme: HashScheme, vocab_size: int, gamma: float, prev_token: int | None) -> GreenMask:
    return green_mask(vocab_size, gamma, derive_seed(scheme, prev_token))
