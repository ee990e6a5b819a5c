"""Reproducible random streams.

All randomness in the package flows through SplitMix64 streams derived
from a single user seed, so results are bit-identical across platforms
and independent of numpy's global RNG state. Named sub-streams keep the
consumers (synthetic scenes, extractor weights, gradient checks) from
perturbing each other's sequences.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Tiny deterministic generator (SplitMix64)."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        return _mix(self._state)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        # 53 mantissa bits -> uniform in [0, 1)
        u = (self.next_u64() >> 11) * (1.0 / (1 << 53))
        return lo + (hi - lo) * u

    def uniforms(self, count: int, lo: float = 0.0, hi: float = 1.0) -> list[float]:
        return [self.uniform(lo, hi) for _ in range(count)]

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi)."""
        span = hi - lo
        if span <= 0:
            raise ValueError("empty integer range")
        return lo + self.next_u64() % span

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i + 1)
            items[i], items[j] = items[j], items[i]


def _name_hash(name: str) -> int:
    # FNV-1a, folded to 64 bits; stable across runs and platforms.
    h = 0xCBF29CE484222325
    for b in name.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _MASK64
    return h


def stream(seed: int, name: str) -> SplitMix64:
    """Derive the named sub-stream of a master seed."""
    return SplitMix64(_mix((seed & _MASK64) ^ _name_hash(name)))
