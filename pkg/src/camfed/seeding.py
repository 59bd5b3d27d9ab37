"""Deterministic random-stream derivation.

Every random draw in the simulator comes from a stream derived from the
master seed plus a stable key path (e.g. round number, client seed, purpose
tag), so results never depend on execution order or parallelism.
"""

import zlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    raise TypeError(f"seed key must be str or int, got {type(key).__name__}")


def derive_rng(master_seed: int, *keys) -> np.random.Generator:
    """Return a Generator for the stream identified by (master_seed, *keys)."""
    entropy = [int(master_seed) & 0xFFFFFFFFFFFFFFFF] + [_key_to_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(master_seed: int, *keys) -> int:
    """Return a 63-bit integer seed for the stream (for nesting derivations)."""
    return int(derive_rng(master_seed, *keys).integers(0, 2**63 - 1))
