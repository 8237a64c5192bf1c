"""Attention-guided routing, prefetching, and feedback-driven policy tuning.

The router turns an intent into an execution plan: attention weights pick
which sources to probe, duplicate probes are suppressed against the shared
cache and in-flight registry, sources that prove useful (or were salient
enough to skip probing) get full-retrieval nodes, and anything priced far
above the median estimated latency is pruned. A first-order Markov model
over region transitions drives prefetch predictions, per-(engine, op) EMAs
track cost, and a bounded rule table nudges probe budget, quorum threshold
and cache ttl from monitored rates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from statistics import median
from typing import Any, Mapping

import numpy as np

from agentfabric.attention import (
    AttentionDistribution,
    Modality,
    SourceDescriptor,
    allocate_probes,
    compute_attention,
)
from agentfabric.cache import SemanticCache, SuppressionDecision, Verdict, suppress_probe
from agentfabric.embedding import DEFAULT_DIM, embed_text, tokenize
from agentfabric.errors import FabricError, RoutingError
from agentfabric.ir import (
    ExecutionPlan,
    Infer,
    Merge,
    MetaProbe,
    PlanBuilder,
    PlanNode,
    Scan,
    VectorSearch,
)
from agentfabric.monitoring import KPIRecord
from agentfabric.quorum import QuorumExpectation

K_MIN, K_MAX = 1, 8
TTL_MIN, TTL_MAX = 10.0, 1000.0
THETA_FLOOR, THETA_CEIL = 0.5, 0.99
RATE_ALPHA = 0.2


@dataclass(frozen=True)
class QueryIntent:
    intent_id: str
    agent_id: str
    text: str
    embedding: np.ndarray
    modality_needs: frozenset[Modality]
    params: Mapping[str, Any] = field(default_factory=dict)


def make_intent(
    intent_id: str,
    agent_id: str,
    text: str,
    modality_needs: set[Modality] | frozenset[Modality],
    params: Mapping[str, Any] | None = None,
    dim: int = DEFAULT_DIM,
) -> QueryIntent:
    """Build an intent whose embedding is derived from its text."""
    return QueryIntent(
        intent_id=intent_id,
        agent_id=agent_id,
        text=text,
        embedding=embed_text(text, dim),
        modality_needs=frozenset(modality_needs),
        params=dict(params or {}),
    )


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------

@dataclass
class CostEstimate:
    est_latency: float = 0.0
    est_token_cost: float = 0.0
    est_usd: float = 0.0
    sample_count: int = 0


class CostModel:
    """EMA latency/token/usd estimates per (engine_id, op_kind)."""

    def __init__(self, ema_alpha: float = 0.2):
        if not 0.0 < ema_alpha <= 1.0:
            raise FabricError("ema_alpha must be in (0, 1]")
        self.ema_alpha = ema_alpha
        self.estimates: dict[tuple[str, str], CostEstimate] = {}

    def get(self, engine_id: str, op_kind: str) -> CostEstimate | None:
        return self.estimates.get((engine_id, op_kind))

    def snapshot_json(self) -> str:
        flat = {
            f"{eng}/{op}": {
                "est_latency": est.est_latency,
                "est_token_cost": est.est_token_cost,
                "est_usd": est.est_usd,
                "sample_count": est.sample_count,
            }
            for (eng, op), est in sorted(self.estimates.items())
        }
        return json.dumps({"ema_alpha": self.ema_alpha, "estimates": flat},
                          indent=2, sort_keys=True)


def update_cost_model(costs: CostModel, kpi: KPIRecord) -> CostModel:
    """Fold one KPI into the model; the first sample seeds the estimate."""
    if kpi.latency < 0 or kpi.rows_or_tokens < 0 or kpi.usd < 0:
        raise FabricError(f"corrupt KPI (negative values): {kpi}")
    key = (kpi.engine_id, kpi.op_kind)
    est = costs.estimates.get(key)
    if est is None or est.sample_count == 0:
        costs.estimates[key] = CostEstimate(
            est_latency=float(kpi.latency),
            est_token_cost=float(kpi.rows_or_tokens),
            est_usd=float(kpi.usd),
            sample_count=1,
        )
        return costs
    a = costs.ema_alpha
    est.est_latency = a * kpi.latency + (1 - a) * est.est_latency
    est.est_token_cost = a * kpi.rows_or_tokens + (1 - a) * est.est_token_cost
    est.est_usd = a * kpi.usd + (1 - a) * est.est_usd
    est.sample_count += 1
    return costs


# ---------------------------------------------------------------------------
# policy state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PolicyState:
    probe_budget: int = 3
    cache_ttl: float = 100.0
    quorum_threshold: float = 0.75
    probe_useful_rate: float = 0.5
    revision_rate: float = 0.0
    shared_hit_rate: float = 0.0

    def snapshot_json(self) -> str:
        return json.dumps(
            {
                "probe_budget": self.probe_budget,
                "cache_ttl": self.cache_ttl,
                "quorum_threshold": self.quorum_threshold,
                "probe_useful_rate": self.probe_useful_rate,
                "revision_rate": self.revision_rate,
                "shared_hit_rate": self.shared_hit_rate,
            },
            indent=2,
            sort_keys=True,
        )


def _ema(prev: float, obs: float, alpha: float = RATE_ALPHA) -> float:
    return alpha * obs + (1 - alpha) * prev


def note_probe_outcome(policy: PolicyState, useful: bool) -> PolicyState:
    return replace(
        policy, probe_useful_rate=_ema(policy.probe_useful_rate, 1.0 if useful else 0.0)
    )


def note_serve_outcome(policy: PolicyState, revised: bool) -> PolicyState:
    return replace(
        policy, revision_rate=_ema(policy.revision_rate, 1.0 if revised else 0.0)
    )


def note_shared_hit_rate(policy: PolicyState, rate: float) -> PolicyState:
    return replace(policy, shared_hit_rate=rate)


def tune_policies(policy: PolicyState) -> PolicyState:
    """Bounded hysteresis rules over the monitored rates.

    Rates in the dead zones leave the policy untouched; every adjusted
    knob is clamped back into its declared range.
    """
    k = policy.probe_budget
    if policy.probe_useful_rate < 0.2:
        k = max(K_MIN, k - 1)
    elif policy.probe_useful_rate > 0.6:
        k = min(K_MAX, k + 1)

    theta = policy.quorum_threshold
    if policy.revision_rate > 0.1:
        theta = min(THETA_CEIL, theta + 0.05)
    elif policy.revision_rate < 0.02:
        theta = max(THETA_FLOOR, theta - 0.02)

    ttl = policy.cache_ttl
    if policy.shared_hit_rate > 0.5:
        ttl *= 1.25
    elif policy.shared_hit_rate < 0.1:
        ttl *= 0.8
    ttl = min(TTL_MAX, max(TTL_MIN, ttl))

    return replace(policy, probe_budget=k, quorum_threshold=theta, cache_ttl=ttl)


# ---------------------------------------------------------------------------
# prefetcher access model
# ---------------------------------------------------------------------------

@dataclass
class AccessModel:
    transition_counts: dict[str, dict[str, int]] = field(default_factory=dict)
    prefetch_threshold: float = 0.4
    top_k_prefetch: int = 2


def observe_access(model: AccessModel, prev_region: str, next_region: str) -> AccessModel:
    model.transition_counts.setdefault(prev_region, {})
    model.transition_counts[prev_region][next_region] = (
        model.transition_counts[prev_region].get(next_region, 0) + 1
    )
    return model


def predict_prefetch(model: AccessModel, current_region: str) -> list[tuple[str, float]]:
    """Successor regions with P(next|current) >= threshold, best first."""
    row = model.transition_counts.get(current_region)
    if not row:
        return []
    total = sum(row.values())
    probs = [(region, count / total) for region, count in row.items()]
    eligible = [(r, p) for r, p in probs if p >= model.prefetch_threshold]
    eligible.sort(key=lambda rp: (-rp[1], rp[0]))
    return eligible[: model.top_k_prefetch]


# ---------------------------------------------------------------------------
# attention-guided router
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RouterConfig:
    tau_a: float = 0.25
    tau_s: float = 0.9
    prune_factor: float = 4.0
    usefulness_cutoff: float = 0.5
    high_weight_cutoff: float = 0.5
    vector_k: int = 5


@dataclass
class ProbeDirective:
    source_id: str
    decision: SuppressionDecision
    probe_embedding: np.ndarray
    nodes: list[MetaProbe]


@dataclass
class RoutedPlan:
    intent_id: str
    attention: AttentionDistribution
    probes: list[ProbeDirective]
    retrieval: list[tuple[str, PlanNode]]  # (source_id, node) pairs
    pruned: list[tuple[str, str]]
    plan: ExecutionPlan
    expectation: QuorumExpectation | None

    @property
    def retrieval_sources(self) -> list[str]:
        return [sid for sid, _ in self.retrieval]

    @property
    def retrieval_nodes(self) -> list[PlanNode]:
        return [n for _, n in self.retrieval]


def probe_embedding_for(intent: QueryIntent, source_id: str) -> np.ndarray:
    """Embedding identifying a probe; identical intents yield identical probes."""
    return embed_text(f"probe {source_id} {intent.text}", intent.embedding.shape[0])


def metadata_probe_node(
    builder: PlanBuilder, source_id: str, goal_text: str
) -> MetaProbe | None:
    """Single relevance probe; its pattern lists %token% alternatives."""
    tokens = []
    seen = set()
    for tok in tokenize(goal_text):
        if tok not in seen:
            seen.add(tok)
            tokens.append(tok)
    if not tokens:
        return None
    pattern = " ".join(f"%{tok}%" for tok in tokens)
    return MetaProbe(node_id=builder.next_id(), source=source_id,
                     name_pattern=pattern)


def _retrieval_node(
    builder: PlanBuilder,
    intent: QueryIntent,
    source: SourceDescriptor,
    config: RouterConfig,
) -> PlanNode:
    override = intent.params.get("plan_overrides", {}).get(source.source_id)
    if override is not None:
        return override
    if source.modality is Modality.RELATIONAL:
        return Scan(
            node_id=builder.next_id(),
            source=source.source_id,
            predicate=intent.params.get("relational_predicate"),
        )
    if source.modality is Modality.VECTOR:
        return VectorSearch(
            node_id=builder.next_id(),
            source=source.source_id,
            query_embedding=intent.embedding,
            k=int(intent.params.get("vector_k", config.vector_k)),
        )
    if source.modality is Modality.STREAM:
        return Scan(
            node_id=builder.next_id(),
            source=source.source_id,
            predicate=intent.params.get("stream_predicate"),
        )
    return Infer(
        node_id=builder.next_id(),
        source=source.source_id,
        model_id=str(intent.params.get("model_id", "default")),
        input_ref=str(intent.params.get("input_text", intent.text)),
    )


def route(
    intent: QueryIntent,
    sources: list[SourceDescriptor],
    policy: PolicyState,
    costs: CostModel,
    *,
    config: RouterConfig = RouterConfig(),
    shared_cache: SemanticCache | None = None,
    inflight: list[tuple[str, np.ndarray]] = (),
    probe_usefulness: Mapping[str, float] | None = None,
    engine_of: Mapping[str, str] | None = None,
    attention_enabled: bool = True,
    suppression_enabled: bool = True,
) -> RoutedPlan:
    """Turn an intent into probes plus full retrievals over viable sources.

    ``probe_usefulness`` carries outcomes of probes already executed for
    this intent; sources covered there are not probed again. With
    attention disabled the router degrades to the naive baseline: every
    candidate is retrieved, nothing is probed or pruned.
    """
    if not sources:
        raise RoutingError("route: no sources registered")
    candidates = [s for s in sources if not intent.modality_needs
                  or s.modality in intent.modality_needs]
    if not candidates:
        raise RoutingError(
            f"no viable sources: none match modalities {sorted(m.value for m in intent.modality_needs)}"
        )
    usefulness = dict(probe_usefulness or {})
    engine_of = engine_of or {}
    builder = PlanBuilder(intent.intent_id)

    if attention_enabled:
        dist = compute_attention(intent.embedding, candidates, config.tau_a)
    else:
        uniform = 1.0 / len(candidates)
        dist = AttentionDistribution(
            weights=[(s.source_id, uniform) for s in candidates],
            selectivity=config.tau_a,
        )

    # estimated latency per candidate's retrieval node kind; prune outliers
    by_id = {s.source_id: s for s in candidates}
    retrieval_nodes = {
        s.source_id: _retrieval_node(builder, intent, s, config) for s in candidates
    }
    ests = {}
    for s in candidates:
        est = costs.get(engine_of.get(s.source_id, ""), retrieval_nodes[s.source_id].kind)
        ests[s.source_id] = est.est_latency if est and est.sample_count else s.advertised_cost
    pruned: list[tuple[str, str]] = []
    viable = list(candidates)
    if attention_enabled and len(candidates) > 1:
        med = median(ests.values())
        for s in candidates:
            if med > 0 and ests[s.source_id] > config.prune_factor * med:
                pruned.append(
                    (s.source_id,
                     f"est latency {ests[s.source_id]:g} > {config.prune_factor:g}x median {med:g}")
                )
        pruned_ids = {sid for sid, _ in pruned}
        viable = [s for s in candidates if s.source_id not in pruned_ids]
    if not viable:
        raise RoutingError("no viable sources: all candidates pruned")
    viable_ids = {s.source_id for s in viable}

    # probes over the top-weighted viable sources not already probed
    probes: list[ProbeDirective] = []
    if attention_enabled:
        viable_dist = AttentionDistribution(
            weights=[(sid, w) for sid, w in dist.weights if sid in viable_ids],
            selectivity=dist.selectivity,
        )
        for source_id, _prio in allocate_probes(viable_dist, policy.probe_budget):
            if source_id in usefulness:
                continue
            pemb = probe_embedding_for(intent, source_id)
            if suppression_enabled:
                decision = suppress_probe(
                    pemb, shared_cache, list(inflight), config.tau_s,
                    modality="metadata",
                )
            else:
                decision = SuppressionDecision(Verdict.PASS_THROUGH)
            nodes: list[MetaProbe] = []
            if decision.verdict is Verdict.PASS_THROUGH:
                node = metadata_probe_node(builder, source_id, intent.text)
                if node is not None:
                    nodes.append(node)
            probes.append(ProbeDirective(source_id, decision, pemb, nodes))

    # full retrieval for sources that earned it
    targets = []
    for s in viable:
        if not attention_enabled:
            targets.append(s.source_id)
        elif usefulness.get(s.source_id, 0.0) >= config.usefulness_cutoff:
            targets.append(s.source_id)
        elif dist.weight_of(s.source_id) >= config.high_weight_cutoff:
            targets.append(s.source_id)
    target_nodes = [retrieval_nodes[sid] for sid in targets]

    top_nodes: list[PlanNode] = [n for p in probes for n in p.nodes]
    if len(target_nodes) > 1:
        top_nodes.append(Merge(node_id=builder.next_id(), inputs=list(target_nodes)))
    else:
        top_nodes.extend(target_nodes)
    plan = ExecutionPlan(plan_id=intent.intent_id, nodes=top_nodes)

    expectation = None
    if targets:
        expectation = QuorumExpectation(
            query_id=intent.intent_id,
            expected_sources=frozenset(targets),
            expected_modalities=frozenset(by_id[sid].modality for sid in targets),
            theta_q=policy.quorum_threshold,
        )
    return RoutedPlan(
        intent_id=intent.intent_id,
        attention=dist,
        probes=probes,
        retrieval=list(zip(targets, target_nodes)),
        pruned=pruned,
        plan=plan,
        expectation=expectation,
    )
