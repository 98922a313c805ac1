"""Deterministic randomness and hashing primitives.

Every stochastic choice in this package (fold shuffles, configuration
sampling, weight init, the mock trainer's metrics) flows through the two
primitives defined here, so runs reproduce bit-for-bit across platforms,
processes, and implementation languages.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1

# splitmix64 constants (Steele/Lea/Flood SplittableRandom finalizer).
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

FNV64_OFFSET_BASIS = 14695981039346656037
FNV64_PRIME = 1099511628211


def fnv1a64(data: bytes | str) -> int:
    """FNV-1a 64-bit hash of bytes (strings are hashed as UTF-8)."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV64_OFFSET_BASIS
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


def derive_state(*parts: object) -> int:
    """Collapse a tuple of seed parts into one 64-bit generator state.

    Parts are joined with ``|`` in their decimal/string form, so the
    derivation is reproducible from any language that can FNV-hash UTF-8.
    """
    return fnv1a64("|".join(str(p) for p in parts))


class SplitMix64:
    """splitmix64 stream; identical seeds yield identical sequences everywhere."""

    __slots__ = ("state",)

    def __init__(self, state: int) -> None:
        self.state = state & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def next_below(self, n: int) -> int:
        if n <= 0:
            raise ValueError("n must be positive")
        return self.next_u64() % n

    def next_float(self) -> float:
        """Uniform float in [0, 1) with 53 mantissa bits."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_below(i + 1)
            items[i], items[j] = items[j], items[i]
