"""Deterministic named sub-stream derivation from a single root seed.

Every random draw in the package flows from one integer seed through
`derive_rng(seed, name, *indices)`. The stream name is hashed with a stable
digest (not Python's randomized hash) so the derivation is identical across
processes and platforms.
"""

import hashlib

import numpy as np


def _stream_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed_sequence(seed: int, name: str, *indices: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), _stream_key(name), *map(int, indices)])


def derive_rng(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Generator for the sub-stream `name` (plus optional per-item indices)."""
    return np.random.default_rng(derive_seed_sequence(seed, name, *indices))
