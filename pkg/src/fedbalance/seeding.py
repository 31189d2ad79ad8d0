"""Deterministic seed derivation used everywhere randomness needs a named stream.

Derived seeds are `base + FNV-1a(tag)` truncated to 63 bits, so adding a new
stream name never perturbs existing ones.
"""

from __future__ import annotations

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(text: str) -> int:
    """64-bit FNV-1a hash of a UTF-8 string."""
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def derive_seed(base: int, *parts) -> int:
    """Stable 63-bit seed for the stream named by `parts` under a base seed."""
    tag = ";".join(str(p) for p in parts)
    return (int(base) + fnv1a64(tag)) & (2**63 - 1)


def rng_for(base: int, *parts) -> np.random.Generator:
    """Fresh generator for the named stream."""
    return np.random.default_rng(derive_seed(base, *parts))
