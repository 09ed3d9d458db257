"""Fixed-dimension embedding vectors for modality names.

Two sources are supported: a JSON table exported from any external text
encoder, and a deterministic hash-seeded fallback that yields a unit-norm
vector for *any* canonical name.  The fallback is what makes unseen
sequence names workable without an in-process encoder.
"""

from __future__ import annotations

import json
import pathlib
import threading
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatchError,
    FormatError,
    InvalidNameError,
    UnknownModalityError,
)
from .rng import stable_hash64

DEFAULT_DIM = 64


def normalize_modality_name(raw: str) -> str:
    """Canonical form: lowercase, trimmed, trailing file extension stripped."""
    name = raw.strip().lower()
    if not name:
        raise InvalidNameError(f"modality name {raw!r} is empty after trimming")
    stem = pathlib.PurePosixPath(name).stem
    if not stem:
        raise InvalidNameError(f"modality name {raw!r} is empty after normalization")
    return stem


@dataclass(frozen=True)
class ModalityEmbedding:
    name: str
    vector: np.ndarray


@dataclass
class EmbeddingSource:
    """Where embedding vectors come from.

    mode "hash": unit-normalized standard-normal draw seeded by a stable
    64-bit hash of the canonical name; total over all valid names.
    mode "table": lookup in a JSON name->vector table; misses raise unless
    allow_fallback routes them to the hash scheme.
    """

    mode: str = "hash"
    dim: int = DEFAULT_DIM
    table: dict[str, np.ndarray] | None = None
    allow_fallback: bool = False

    def __post_init__(self):
        if self.mode not in ("hash", "table"):
            raise ValueError(f"unknown embedding mode {self.mode!r}")
        if self.mode == "table" and self.table is None:
            raise ValueError("table mode requires a loaded table")


class EmbeddingCache:
    """Per-run cache; concurrent readers, atomic insert per key."""

    def __init__(self):
        self._data: dict[tuple[str, int], np.ndarray] = {}
        self._lock = threading.Lock()

    def get(self, key):
        return self._data.get(key)

    def put(self, key, vector):
        with self._lock:
            # Double-compute is fine: vectors are deterministic per key.
            return self._data.setdefault(key, vector)

    def __len__(self):
        return len(self._data)


def hash_seeded_vector(name: str, dim: int) -> np.ndarray:
    rng = np.random.default_rng(stable_hash64(name))
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


def load_embedding_table(path) -> dict[str, np.ndarray]:
    """Parse a JSON map name -> vector; all vectors must share one dimension."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"embedding table {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise FormatError(f"embedding table {path}: expected a JSON object")
    table: dict[str, np.ndarray] = {}
    dim = None
    for key, values in raw.items():
        name = normalize_modality_name(key)
        try:
            vec = np.asarray(values, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise FormatError(f"embedding table {path}: entry {key!r}") from exc
        if vec.ndim != 1:
            raise FormatError(f"embedding table {path}: entry {key!r} is not a vector")
        if dim is None:
            dim = vec.shape[0]
        elif vec.shape[0] != dim:
            raise DimensionMismatchError(
                f"entry {key!r} has dimension {vec.shape[0]}, expected {dim}"
            )
        table[name] = vec
    return table


def embed_modality(
    name: str,
    src: EmbeddingSource,
    cache: EmbeddingCache | None = None,
) -> ModalityEmbedding:
    """Embedding for a (possibly raw) modality name, via cache when given."""
    canonical = normalize_modality_name(name)
    key = (canonical, src.dim)
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return ModalityEmbedding(canonical, hit)

    if src.mode == "table":
        vec = src.table.get(canonical)
        if vec is None:
            if not src.allow_fallback:
                raise UnknownModalityError(canonical)
            vec = hash_seeded_vector(canonical, src.dim)
        elif vec.shape[0] != src.dim:
            raise DimensionMismatchError(
                f"table vector for {canonical!r} has dimension {vec.shape[0]}, "
                f"source expects {src.dim}"
            )
    else:
        vec = hash_seeded_vector(canonical, src.dim)

    if cache is not None:
        vec = cache.put(key, vec)
    return ModalityEmbedding(canonical, vec)
