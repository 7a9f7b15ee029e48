"""Deterministic seed derivation.

Every stochastic component takes an explicit integer seed. Sub-seeds are
derived from a parent seed plus a sequence of string or integer tags via a
splitmix64 chain, so independent pipeline stages get decorrelated streams
and the whole experiment is reproducible from one root seed.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(state: int) -> int:
    """One splitmix64 output step (Steele et al. finalizer)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


def derive_seed(root: int, *tags: int | str) -> int:
    """Derive a 64-bit sub-seed from a root seed and a tag path.

    Tags may be ints or strings; the same (root, tags) always yields the
    same result, and distinct tag paths decorrelate.
    """
    state = _splitmix64(root & _MASK64)
    for tag in tags:
        if isinstance(tag, str):
            folded = _fnv1a64(tag)
        else:
            folded = tag & _MASK64
        state = _splitmix64(state ^ folded)
    return state


def make_rng(root: int, *tags: int | str) -> np.random.Generator:
    """PCG64 generator seeded from a derived sub-seed."""
    return np.random.Generator(np.random.PCG64(derive_seed(root, *tags)))
