"""Confidence-driven early serving of partial results.

A query fans out to several backends; partial results accumulate in a
QuorumState. Confidence is a convex combination of coverage (fraction of
expected sources heard from), diversity (fraction of expected modalities
heard from) and agreement (mean pairwise embedding similarity of the
responses, mapped to [0, 1]). Once confidence reaches the threshold the
merged answer is served; anything arriving after that only triggers a
revision check against the served consensus.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from agentfabric import kernels
from agentfabric.attention import Modality
from agentfabric.embedding import cosine
from agentfabric.errors import FabricError

DEFAULT_WEIGHTS = (0.4, 0.2, 0.4)  # coverage, diversity, agreement
AGREEMENT_PRIOR = 0.5
REVISION_BOUND = 0.6


@dataclass(frozen=True)
class QuorumExpectation:
    query_id: str
    expected_sources: frozenset[str]
    expected_modalities: frozenset[Modality]
    theta_q: float

    def __post_init__(self):
        if not self.expected_sources:
            raise FabricError("expectation needs at least one source")
        if not 0.0 < self.theta_q <= 1.0:
            raise FabricError("theta_q must be in (0, 1]")


@dataclass(frozen=True)
class PartialResult:
    query_id: str
    source_id: str
    modality: Modality
    payload: Any
    result_embedding: np.ndarray
    arrived_at: int


@dataclass(frozen=True)
class RevisionEvent:
    query_id: str
    payload: Any
    divergence: float


@dataclass
class QuorumState:
    expectation: QuorumExpectation
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS
    agreement_prior: float = AGREEMENT_PRIOR
    revision_bound: float = REVISION_BOUND
    received: dict[str, PartialResult] = field(default_factory=dict)
    coverage: float = 0.0
    diversity: float = 0.0
    agreement: float = AGREEMENT_PRIOR
    conf: float = 0.0
    served: bool = False
    served_at: int | None = None
    served_answer: dict | None = None
    _served_mean_embedding: np.ndarray | None = None

    def __post_init__(self):
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise FabricError("confidence weights must sum to 1")


def combine_confidence(
    coverage: float,
    diversity: float,
    agreement: float,
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS,
) -> float:
    """conf as the weighted sum of the three quorum components."""
    w_c, w_d, w_a = weights
    return w_c * coverage + w_d * diversity + w_a * agreement


def _recompute(state: QuorumState) -> None:
    exp = state.expectation
    results = [state.received[sid] for sid in sorted(state.received)]
    state.coverage = len(results) / len(exp.expected_sources)
    responding_modalities = {r.modality for r in results}
    state.diversity = len(responding_modalities) / len(exp.expected_modalities)
    if len(results) < 2:
        state.agreement = state.agreement_prior
    else:
        embs = np.stack([r.result_embedding for r in results])
        state.agreement = (kernels.pairwise_mean(embs) + 1.0) / 2.0
    if not results:
        state.conf = 0.0
    else:
        state.conf = combine_confidence(
            state.coverage, state.diversity, state.agreement, state.weights
        )


def accept_partial(
    state: QuorumState, expectation: QuorumExpectation, result: PartialResult
) -> QuorumState:
    """Fold a partial result in; a repeat source replaces its earlier result."""
    if result.query_id != expectation.query_id:
        raise FabricError(
            f"partial for query {result.query_id!r} applied to {expectation.query_id!r}"
        )
    if result.source_id not in expectation.expected_sources:
        raise FabricError(f"unexpected source {result.source_id!r}")
    state.received[result.source_id] = result
    _recompute(state)
    return state


def confidence(state: QuorumState) -> float:
    """Current confidence; 0 when nothing has arrived."""
    return state.conf


def _do_serve(state: QuorumState, expectation: QuorumExpectation, now: int) -> dict:
    results = [state.received[sid] for sid in sorted(state.received)]
    answer = {
        "query_id": expectation.query_id,
        "conf": state.conf,
        "results": [
            {"source_id": r.source_id, "modality": r.modality.value, "payload": r.payload}
            for r in results
        ],
    }
    state.served = True
    state.served_at = now
    state.served_answer = answer
    embs = np.stack([r.result_embedding for r in results])
    state._served_mean_embedding = embs.mean(axis=0)
    return answer


def maybe_serve(
    state: QuorumState, expectation: QuorumExpectation, now: int
) -> dict | None:
    """Serve the merged answer if confidence has reached theta_q, else wait.

    Serving happens at most once (>= at the boundary); the merged answer
    carries every received payload tagged by source and modality plus the
    confidence at serve time.
    """
    if state.served:
        raise FabricError("maybe_serve on an already-served state")
    if state.conf < expectation.theta_q:
        return None
    return _do_serve(state, expectation, now)


def serve_full(
    state: QuorumState, expectation: QuorumExpectation, now: int
) -> dict:
    """Serve once every expected source has responded, threshold or not.

    This is the traditional wait-for-everything path (quorum disabled) and
    the completeness fallback when confidence never clears the bar.
    """
    if state.served:
        raise FabricError("serve_full on an already-served state")
    if set(state.received) != set(expectation.expected_sources):
        raise FabricError("serve_full before all expected sources responded")
    return _do_serve(state, expectation, now)


def revise(state: QuorumState, late: PartialResult) -> RevisionEvent | None:
    """Check a late arrival against the served consensus.

    Emits a revision event when the late result's normalized agreement with
    the mean served embedding falls below the revision bound.
    """
    if not state.served:
        raise FabricError("revise on a state that has not served")
    norm_agreement = (cosine(late.result_embedding, state._served_mean_embedding) + 1.0) / 2.0
    if norm_agreement < state.revision_bound:
        return RevisionEvent(
            query_id=late.query_id,
            payload=late.payload,
            divergence=1.0 - norm_agreement,
        )
    return None
