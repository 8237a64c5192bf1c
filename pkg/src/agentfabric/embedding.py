"""Deterministic feature-hash embeddings and cosine similarity.

Text is lowercased and split on non-alphanumeric runs; each token lands on
one of ``dim`` coordinates through a fixed 64-bit FNV-1a hash (seeded with
a documented constant), contributing +1 or -1 by the hash's top bit. The
accumulated vector is L2-normalized. No learned weights anywhere, so the
same string embeds to the same bits on every run.

An empty token set embeds to the all-zero vector, which acts as an
"empty input" sentinel: cosine against it is defined as 0.0.
"""

from __future__ import annotations

import re

import numpy as np

from agentfabric.errors import DimensionMismatchError

DEFAULT_DIM = 64

# FNV-1a 64-bit, offset basis perturbed by a fixed project seed so the
# coordinate assignment is ours rather than the textbook one.
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_HASH_SEED = 0x5DEECE66D
_MASK64 = (1 << 64) - 1

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric runs."""
    return _TOKEN_RE.findall(text.lower())


def token_hash(token: str) -> int:
    """Fixed 64-bit hash of a token (FNV-1a over UTF-8 bytes, seeded)."""
    h = (_FNV_OFFSET ^ _HASH_SEED) & _MASK64
    for byte in token.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def token_slot(token: str, dim: int = DEFAULT_DIM) -> tuple[int, float]:
    """(coordinate, sign) a token contributes to; sign from the hash top bit."""
    h = token_hash(token)
    sign = 1.0 if (h >> 63) == 0 else -1.0
    return h % dim, sign


def embed_text(text: str, dim: int = DEFAULT_DIM) -> np.ndarray:
    """Embed a string into a unit-norm vector of length ``dim``.

    Deterministic: identical input yields bit-identical output. An input
    with no tokens returns the all-zero sentinel.
    """
    vec = np.zeros(dim, dtype=np.float64)
    tokens = tokenize(text)
    if not tokens:
        return vec
    for token in tokens:
        idx, sign = token_slot(token, dim)
        vec[idx] += sign
    norm = np.sqrt(np.dot(vec, vec))
    if norm == 0.0:
        # opposing contributions cancelled out exactly; keep the sentinel
        return vec
    return vec / norm


def is_zero(vec: np.ndarray) -> bool:
    return not np.any(vec)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity in [-1, 1]; 0.0 if either operand is the zero sentinel."""
    if a.shape != b.shape:
        raise DimensionMismatchError(
            f"embedding dims differ: {a.shape[0]} vs {b.shape[0]}"
        )
    na = np.sqrt(np.dot(a, a))
    nb = np.sqrt(np.dot(b, b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    val = float(np.dot(a, b) / (na * nb))
    return max(-1.0, min(1.0, val))
