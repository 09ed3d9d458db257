"""Deterministic random-stream derivation.

Every stochastic component draws from its own counter-based (Philox) stream
derived from a root seed plus a key path of strings and integers.  Streams
are therefore independent of evaluation order across modalities, sessions,
and steps, and identical across processes and platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stable_hash64(text: str) -> int:
    """64-bit hash of a string, stable across processes (unlike hash())."""
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_entropy(seed: int, *keys: str | int) -> list[int]:
    entropy = [int(seed) & _MASK64]
    for key in keys:
        if isinstance(key, str):
            entropy.append(stable_hash64(key))
        else:
            entropy.append(int(key) & _MASK64)
    return entropy


def stream(seed: int, *keys: str | int) -> np.random.Generator:
    """Independent generator for (seed, *keys); same keys, same draws."""
    seq = np.random.SeedSequence(derive_entropy(seed, *keys))
    return np.random.Generator(np.random.Philox(seq))
