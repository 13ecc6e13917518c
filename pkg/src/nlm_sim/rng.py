"""SplitMix64 streams with per-system substreams.

Every system in a world draws from its own stream, seeded from the world
seed and the system id, so adding draws to one system never shifts the
numbers seen by another.

Substream derivation::

    substream_seed(seed, sid) = finalize(seed XOR ((sid + 1) * GOLDEN) mod 2**64)

where ``finalize`` is the SplitMix64 output mix. ``(sid + 1) * GOLDEN`` is
injective on 64-bit ids because GOLDEN is odd, and ``finalize`` is a
bijection, so distinct ids always get distinct starting states.

Bounded integers use the multiply-high mapping
``lo + ((x * span) >> 64)`` with ``span = hi - lo + 1``. It never rejects a
draw (one raw output per integer) and takes the high bits, so the low-bit
bias of ``x % span`` does not apply; the residual bias is below
``span / 2**64``.
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB


def finalize(z: int) -> int:
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def substream_seed(seed: int, system_id: int) -> int:
    check_seed(seed)
    return finalize((seed ^ (((system_id + 1) * GOLDEN) & MASK64)) & MASK64)


def check_seed(seed: int) -> int:
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed <= MASK64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    return seed


class SplitMix64:
    """A single SplitMix64 generator."""

    __slots__ = ("state",)

    def __init__(self, seed: int = 0):
        self.state = check_seed(seed)

    @classmethod
    def for_system(cls, seed: int, system_id: int) -> "SplitMix64":
        return cls(substream_seed(seed, system_id))

    def next_random(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return finalize(self.state)

    def next_uniform_int(self, lo: int, hi: int) -> int:
        """Integer in the closed interval ``[lo, hi]``."""
        if lo > hi:
            raise ValueError(f"empty interval [{lo}, {hi}]")
        span = hi - lo + 1
        return lo + ((self.next_random() * span) >> 64)

    def next_float(self) -> float:
        """Uniform float in ``[0, 1)`` from the top 53 bits."""
        return (self.next_random() >> 11) * (1.0 / (1 << 53))

    def __repr__(self) -> str:
        return f"SplitMix64(state=0x{self.state:016x})"
