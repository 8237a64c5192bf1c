"""Attention weighting over candidate data sources.

Weights are a temperature-controlled softmax over cosine similarity
between the query embedding and each source's summary embedding. The
``selectivity`` temperature (tau_a) sharpens the distribution as it
shrinks. Probe budgets are spent on the top-weighted sources, and probe
feedback reweights the distribution multiplicatively without ever zeroing
a source out.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from agentfabric import kernels
from agentfabric.embedding import cosine
from agentfabric.errors import FabricError

FEEDBACK_EPSILON = 0.01
NEUTRAL_USEFULNESS = 0.5


class Modality(str, Enum):
    RELATIONAL = "relational"
    VECTOR = "vector"
    STREAM = "stream"
    INFERENCE = "inference"


@dataclass(frozen=True)
class SourceDescriptor:
    source_id: str
    modality: Modality
    summary_embedding: np.ndarray
    advertised_cost: float = 1.0


@dataclass
class AttentionDistribution:
    """Normalized weights over candidate sources, in candidate order."""

    weights: list[tuple[str, float]]
    selectivity: float

    def weight_of(self, source_id: str) -> float:
        for sid, w in self.weights:
            if sid == source_id:
                return w
        raise KeyError(source_id)

    def as_dict(self) -> dict[str, float]:
        return dict(self.weights)


def compute_attention(
    query: np.ndarray,
    sources: list[SourceDescriptor],
    tau_a: float,
) -> AttentionDistribution:
    """Softmax of cosine(query, source)/tau_a over the candidate sources."""
    if not sources:
        raise FabricError("compute_attention: empty source list")
    if tau_a <= 0:
        raise FabricError(f"compute_attention: selectivity must be > 0, got {tau_a}")
    sims = np.array([cosine(query, s.summary_embedding) for s in sources])
    weights = kernels.softmax(sims / tau_a)
    pairs = [(s.source_id, float(w)) for s, w in zip(sources, weights)]
    return AttentionDistribution(weights=pairs, selectivity=tau_a)


def allocate_probes(
    dist: AttentionDistribution, budget: int
) -> list[tuple[str, float]]:
    """Top-min(budget, n) sources by weight; ties break on lexicographic id."""
    if budget < 1:
        raise FabricError(f"allocate_probes: budget must be >= 1, got {budget}")
    ranked = sorted(dist.weights, key=lambda sw: (-sw[1], sw[0]))
    return ranked[: min(budget, len(ranked))]


def update_attention(
    dist: AttentionDistribution,
    feedback: list[tuple[str, float]],
) -> AttentionDistribution:
    """Multiplicative reweight by (epsilon + usefulness), renormalized.

    Sources without feedback get the neutral usefulness 0.5; the epsilon
    floor keeps every weight strictly positive.
    """
    known = {sid for sid, _ in dist.weights}
    useful = {}
    for sid, u in feedback:
        if sid not in known:
            raise FabricError(f"update_attention: unknown source {sid!r}")
        useful[sid] = u
    raw = np.array(
        [w * (FEEDBACK_EPSILON + useful.get(sid, NEUTRAL_USEFULNESS))
         for sid, w in dist.weights]
    )
    raw /= raw.sum()
    pairs = [(sid, float(w)) for (sid, _), w in zip(dist.weights, raw)]
    return AttentionDistribution(weights=pairs, selectivity=dist.selectivity)
