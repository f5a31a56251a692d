"""One seed in, independent per-component seeds out (SplitMix64 expansion).

Stream k of seed s is the k-th output of a SplitMix64 generator started at
state s, with streams numbered from 1 in the order of ``STREAMS``.
"""
from __future__ import annotations

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

STREAMS = ("init", "data", "shuffle", "probe", "bench", "check")


def splitmix64(state: int) -> tuple[int, int]:
    """Advance ``state`` once; return (new_state, output)."""
    state = (state + GOLDEN) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def derive_seed(seed: int, stream: str) -> int:
    k = STREAMS.index(stream) + 1
    state, out = int(seed) & MASK64, 0
    for _ in range(k):
        state, out = splitmix64(state)
    return out
