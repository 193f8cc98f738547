"""Stable seed derivation.

Python's builtin hash is salted per process, so reproducible per-sample seeds
are derived from SHA-256 of a canonical string instead. Any mix of ints and
strings can be folded in.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stable_seed(*parts: int | str) -> int:
    """Collapse the parts into a deterministic unsigned 64-bit seed."""
    text = "|".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_from(*parts: int | str) -> np.random.Generator:
    return np.random.default_rng(stable_seed(*parts))
