"""Small shared helpers: hashing, seeding, array serialization."""

from __future__ import annotations

import base64

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes) -> int:
    """FNV-1a 64-bit hash."""
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def rng_for(seed: int, *tags) -> np.random.Generator:
    """Deterministic generator derived from a seed and a tag path.

    Tags (strings or ints) are folded through FNV-1a so independent
    subsystems draw from independent, reproducible streams.
    """
    words = [int(seed) & _MASK64]
    for tag in tags:
        words.append(fnv1a_64(str(tag).encode("utf-8")))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def pack_array(a: np.ndarray) -> dict:
    """JSON-safe array encoding: shape + base64 of little-endian f64 bytes."""
    a = np.ascontiguousarray(a, dtype="<f8")
    return {
        "shape": list(a.shape),
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def unpack_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"].encode("ascii"))
    a = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return a.reshape(obj["shape"])
