"""Deterministic instruction encoder: hashed bag-of-tokens projection.

Stands in for a frozen sentence encoder. Tokens are lowercased,
whitespace-split, FNV-1a hashed into a fixed bucket table of random
vectors; the bucket vectors are averaged and L2-normalized. The table is
frozen at construction, so the embedding of a string is a pure function
of (seed, string).
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, IntegrityError
from .util import fnv1a_64, pack_array, rng_for, unpack_array

NUM_BUCKETS = 4096
_NORM_EPS = 1e-12


class SurrogateEncoder:
    def __init__(self, embed_dim: int, seed: int, _table: np.ndarray | None = None):
        self.embed_dim = int(embed_dim)
        self.seed = int(seed)
        if _table is None:
            rng = rng_for(seed, "surrogate-table")
            _table = rng.standard_normal((NUM_BUCKETS, self.embed_dim))
        self._table = _table
        self._table.setflags(write=False)
        self._feature_proj: np.ndarray | None = None
        self._cache: dict[str, np.ndarray] = {}

    def encode(self, instruction: str) -> np.ndarray:
        """Unit-norm embedding of an instruction string."""
        cached = self._cache.get(instruction)
        if cached is not None:
            return cached
        tokens = instruction.lower().split()
        if not tokens:
            raise DegenerateInputError("encode: instruction is empty after tokenization")
        buckets = [fnv1a_64(tok.encode("utf-8")) % NUM_BUCKETS for tok in tokens]
        # Summing in sorted bucket order makes the result exactly
        # invariant to token permutation despite float rounding.
        buckets.sort()
        vec = self._table[buckets].sum(axis=0) / len(buckets)
        norm = float(np.linalg.norm(vec))
        if norm <= _NORM_EPS:
            raise DegenerateInputError("encode: bucket average has near-zero norm")
        out = vec / norm
        out.setflags(write=False)
        self._cache[instruction] = out
        return out

    def encode_features(self, features: np.ndarray) -> np.ndarray:
        """Unit-norm embedding of a raw feature vector (vision-path analogue).

        Uses a fixed seeded projection from the feature dimension into the
        embedding dimension, created lazily on first use.
        """
        features = np.asarray(features, dtype=np.float64)
        if self._feature_proj is None or self._feature_proj.shape[0] != features.size:
            rng = rng_for(self.seed, "surrogate-feature-proj", features.size)
            self._feature_proj = rng.standard_normal((features.size, self.embed_dim))
        vec = features @ self._feature_proj
        norm = float(np.linalg.norm(vec))
        if norm <= _NORM_EPS:
            raise DegenerateInputError("encode_features: projected norm is near zero")
        return vec / norm

    # -- persistence -------------------------------------------------------

    def to_state(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "seed": self.seed,
            "table": pack_array(self._table),
        }

    @classmethod
    def from_state(cls, state: dict) -> "SurrogateEncoder":
        table = unpack_array(state["table"])
        if table.shape != (NUM_BUCKETS, int(state["embed_dim"])):
            raise IntegrityError("encoder table has unexpected shape")
        return cls(state["embed_dim"], state["seed"], _table=table)
