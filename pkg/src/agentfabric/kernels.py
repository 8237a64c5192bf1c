"""Numeric inner loops shared by the similarity-heavy components.

Every kernel has two implementations: a numba ``@njit`` version (default
when numba imports cleanly) and a pure-numpy version. Set
``AGENTFABRIC_PURE_NUMPY=1`` to force the numpy path; ``USING_NUMBA``
reports which one is live. Both paths agree to float rounding (see
tests/test_kernels.py) and tie-breaks are exact in both.

benchmarks/bench_kernels.py compares the two paths head to head.
"""

from __future__ import annotations

import os

import numpy as np

_FORCE_NUMPY = os.environ.get("AGENTFABRIC_PURE_NUMPY", "").strip() not in ("", "0")


# ---------------------------------------------------------------------------
# pure-numpy implementations
# ---------------------------------------------------------------------------

def similarities_np(keys: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Dot product of each row of ``keys`` against ``query``.

    Rows and query are unit-norm or all-zero, so this is cosine similarity
    with the zero-vector sentinel mapping to 0.0.
    """
    return keys @ query


def softmax_np(scores: np.ndarray) -> np.ndarray:
    """Numerically stabilized softmax (max subtracted before exp)."""
    shifted = scores - scores.max()
    e = np.exp(shifted)
    return e / e.sum()


def top_k_np(sims: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest sims, descending; ties favor the smaller index."""
    n = sims.shape[0]
    order = np.lexsort((np.arange(n), -sims))
    return order[: min(k, n)].astype(np.int64)


def pairwise_mean_np(embs: np.ndarray) -> float:
    """Mean dot product over unordered row pairs; 0.0 if fewer than 2 rows."""
    m = embs.shape[0]
    if m < 2:
        return 0.0
    gram = embs @ embs.T
    iu = np.triu_indices(m, k=1)
    return float(gram[iu].mean())


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

try:  # pragma: no cover - exercised indirectly via the active binding
    from numba import njit

    @njit(cache=True)
    def similarities_nb(keys, query):
        n, d = keys.shape
        out = np.empty(n)
        for i in range(n):
            acc = 0.0
            for j in range(d):
                acc += keys[i, j] * query[j]
            out[i] = acc
        return out

    @njit(cache=True)
    def softmax_nb(scores):
        n = scores.shape[0]
        hi = scores[0]
        for i in range(1, n):
            if scores[i] > hi:
                hi = scores[i]
        out = np.empty(n)
        total = 0.0
        for i in range(n):
            out[i] = np.exp(scores[i] - hi)
            total += out[i]
        for i in range(n):
            out[i] /= total
        return out

    @njit(cache=True)
    def top_k_nb(sims, k):
        n = sims.shape[0]
        m = k if k < n else n
        taken = np.zeros(n, dtype=np.bool_)
        out = np.empty(m, dtype=np.int64)
        for slot in range(m):
            best = -1
            for i in range(n):
                if taken[i]:
                    continue
                if best < 0 or sims[i] > sims[best]:
                    best = i
            out[slot] = best
            taken[best] = True
        return out

    @njit(cache=True)
    def pairwise_mean_nb(embs):
        m, d = embs.shape
        if m < 2:
            return 0.0
        total = 0.0
        pairs = 0
        for i in range(m):
            for j in range(i + 1, m):
                acc = 0.0
                for c in range(d):
                    acc += embs[i, c] * embs[j, c]
                total += acc
                pairs += 1
        return total / pairs

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    similarities_nb = softmax_nb = top_k_nb = pairwise_mean_nb = None
    HAVE_NUMBA = False


USING_NUMBA = HAVE_NUMBA and not _FORCE_NUMPY

if USING_NUMBA:
    similarities = similarities_nb
    softmax = softmax_nb
    top_k = top_k_nb
    pairwise_mean = pairwise_mean_nb
else:
    similarities = similarities_np
    softmax = softmax_np
    top_k = top_k_np
    pairwise_mean = pairwise_mean_np


def warmup() -> None:
    """Trigger JIT compilation (or no-op on the numpy path)."""
    keys = np.eye(4)
    q = keys[0]
    similarities(keys, q)
    softmax(np.array([0.5, 0.25, 0.0, -0.5]))
    top_k(np.array([0.1, 0.9, 0.9, 0.2]), 2)
    pairwise_mean(keys)
