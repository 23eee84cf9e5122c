"""Deterministic per-stream seeds.

A stream seed is derived from ``(base seed, replica index, tag)``::

    h = mix64(base)
    h = mix64(h ^ fnv1a64(tag))
    h = mix64(h ^ replica)

``mix64`` is the SplitMix64 finalizer (increment by the golden gamma, then
two xor-shift-multiply rounds).  Test vectors live in the README and in
``tests/test_seeding.py``.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    z = (z + GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


def stream_seed(base: int, replica: int = 0, tag: str = "") -> int:
    if not 0 <= base <= MASK64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    h = mix64(base)
    h = mix64(h ^ fnv1a64(tag))
    return mix64(h ^ (replica & MASK64))


def make_rng(base: int, replica: int = 0, tag: str = "") -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(stream_seed(base, replica, tag)))
