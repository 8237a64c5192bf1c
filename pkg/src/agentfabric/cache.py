"""Embedding-indexed caches and cross-agent duplicate suppression.

Two scopes exist: per-agent micro-caches for task-local fragments and one
shared cache per federation for entries confirmed useful across agents.
Retention is a decayed-frequency score over reuse count and attention
frequency; the coldest entry goes first when capacity is exceeded.

``suppress_probe`` is the cross-agent manager's gate: a probe close enough
to a cached entry is redirected to it, one close enough to an in-flight
probe is delayed until that probe lands, and anything else passes through
to the backends. Cached knowledge beats waiting, so redirect wins when
both apply.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np

from agentfabric import kernels
from agentfabric.embedding import cosine
from agentfabric.errors import DimensionMismatchError

DEFAULT_HALF_LIFE = 100.0
DEFAULT_BETA = 1.0
DEFAULT_PROMOTE_MIN = 2


@dataclass
class CacheEntry:
    entry_id: str
    key_embedding: np.ndarray
    payload: Any
    modality: str
    producer_agent: str
    created_at: int
    last_hit_at: int
    reuse_count: int = 0
    attention_freq: float = 0.0
    provenance: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class CacheScope:
    kind: str  # "micro" | "shared"
    owner: str

    def __str__(self) -> str:
        return f"{self.kind}:{self.owner}"


class Verdict(str, Enum):
    PASS_THROUGH = "pass_through"
    REDIRECT = "redirect_to_entry"
    DELAY = "delay_until"


@dataclass(frozen=True)
class SuppressionDecision:
    verdict: Verdict
    entry_id: str | None = None
    inflight_probe_id: str | None = None
    similarity: float = 0.0


def retention_score(
    entry: CacheEntry, now: int, beta: float, half_life: float
) -> float:
    age = now - entry.last_hit_at
    return (entry.reuse_count + beta * entry.attention_freq) * 2.0 ** (-age / half_life)


class SemanticCache:
    """Fixed-capacity cache keyed by embedding similarity."""

    def __init__(
        self,
        scope: CacheScope,
        capacity: int,
        hit_threshold: float,
        dim: int,
        half_life: float = DEFAULT_HALF_LIFE,
        beta: float = DEFAULT_BETA,
    ):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        if not 0.0 < hit_threshold <= 1.0:
            raise ValueError("hit_threshold must be in (0, 1]")
        self.scope = scope
        self.capacity = capacity
        self.hit_threshold = hit_threshold
        self.dim = dim
        self.half_life = half_life
        self.beta = beta
        self.entries: dict[str, CacheEntry] = {}
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self.entries)

    def _best_match(
        self, query: np.ndarray, modality: str | None = None
    ) -> tuple[CacheEntry, float] | None:
        ids = sorted(
            eid for eid, e in self.entries.items()
            if modality is None or e.modality == modality
        )
        if not ids:
            return None
        keys = np.stack([self.entries[i].key_embedding for i in ids])
        qn = np.sqrt(np.dot(query, query))
        if qn == 0.0:
            return None
        sims = kernels.similarities(keys, query / qn)
        # max similarity; ties prefer the most recently hit, then smallest id
        best = min(
            range(len(ids)),
            key=lambda i: (-sims[i], -self.entries[ids[i]].last_hit_at, ids[i]),
        )
        return self.entries[ids[best]], float(sims[best])

    def peek(
        self, query: np.ndarray, threshold: float | None = None,
        modality: str | None = None,
    ) -> tuple[CacheEntry, float] | None:
        """Best match at or above threshold, without touching cache state.

        ``modality`` restricts matching to entries carrying that tag, so a
        metadata sketch can never answer a result lookup.
        """
        tau = self.hit_threshold if threshold is None else threshold
        found = self._best_match(query, modality)
        if found is None or found[1] < tau:
            return None
        return found

    def lookup(
        self, query: np.ndarray, now: int, modality: str | None = None
    ) -> tuple[CacheEntry, float] | None:
        """Hit bumps reuse_count and last_hit_at; a miss changes nothing."""
        found = self.peek(query, modality=modality)
        if found is None:
            self.misses += 1
            return None
        entry, sim = found
        entry.reuse_count += 1
        entry.last_hit_at = now
        self.hits += 1
        return entry, sim

    def insert(self, entry: CacheEntry, now: int) -> list[CacheEntry]:
        """Add an entry, evicting minimum-retention entries while over capacity.

        A fresh entry scores zero, so inserting into a full cache of warm
        residents evicts the newcomer itself. Score ties evict the
        lexicographically smallest entry id. Returns whatever was evicted.
        """
        if entry.key_embedding.shape[0] != self.dim:
            raise DimensionMismatchError(
                f"entry dim {entry.key_embedding.shape[0]} != cache dim {self.dim}"
            )
        self.entries[entry.entry_id] = entry
        evicted = []
        while len(self.entries) > self.capacity:
            victim_id = min(
                self.entries,
                key=lambda eid: (
                    retention_score(self.entries[eid], now, self.beta, self.half_life),
                    eid,
                ),
            )
            evicted.append(self.entries.pop(victim_id))
        return evicted

    def bump_attention(self, entry_id: str, amount: float = 1.0) -> None:
        """Record a high-attention touch on an entry (retention signal)."""
        self.entries[entry_id].attention_freq += amount

    def touch(self, entry_id: str, now: int) -> CacheEntry:
        """Register a reuse of a known entry (redirect verdicts land here)."""
        entry = self.entries[entry_id]
        entry.reuse_count += 1
        entry.last_hit_at = now
        self.hits += 1
        return entry

    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    def dump(self) -> str:
        """One entry per line: entry_id, scope, reuse_count, attention_freq,
        created_at, provenance."""
        lines = []
        for eid in sorted(self.entries):
            e = self.entries[eid]
            prov = ",".join(e.provenance)
            lines.append(
                f"{e.entry_id} {self.scope} {e.reuse_count} "
                f"{e.attention_freq:g} {e.created_at} {prov}"
            )
        return "\n".join(lines)


def detect_overlap(
    active_tasks: list[tuple[str, np.ndarray]], overlap_threshold: float
) -> list[tuple[str, str, float]]:
    """Unordered agent pairs with task cosine >= threshold.

    Sorted by similarity descending, then by the lexicographic pair.
    """
    if not 0.0 < overlap_threshold <= 1.0:
        raise ValueError("overlap_threshold must be in (0, 1]")
    out = []
    for i in range(len(active_tasks)):
        for j in range(i + 1, len(active_tasks)):
            a_id, a_emb = active_tasks[i]
            b_id, b_emb = active_tasks[j]
            sim = cosine(a_emb, b_emb)
            if sim >= overlap_threshold:
                lo, hi = sorted((a_id, b_id))
                out.append((lo, hi, sim))
    out.sort(key=lambda t: (-t[2], t[0], t[1]))
    return out


def suppress_probe(
    probe_embedding: np.ndarray,
    shared: SemanticCache | None,
    inflight: list[tuple[str, np.ndarray]],
    tau_s: float,
    modality: str | None = None,
) -> SuppressionDecision:
    """Decide whether a probe needs to reach the backend at all."""
    if not 0.0 < tau_s <= 1.0:
        raise ValueError("tau_s must be in (0, 1]")
    if shared is not None:
        found = shared.peek(probe_embedding, threshold=tau_s, modality=modality)
        if found is not None:
            entry, sim = found
            return SuppressionDecision(
                Verdict.REDIRECT, entry_id=entry.entry_id, similarity=sim
            )
    if inflight:
        scored = sorted(
            ((cosine(probe_embedding, emb), pid) for pid, emb in inflight),
            key=lambda t: (-t[0], t[1]),
        )
        sim, pid = scored[0]
        if sim >= tau_s:
            return SuppressionDecision(
                Verdict.DELAY, inflight_probe_id=pid, similarity=sim
            )
    return SuppressionDecision(Verdict.PASS_THROUGH)
