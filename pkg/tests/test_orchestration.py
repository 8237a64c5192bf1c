import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agentfabric.attention import Modality, SourceDescriptor
from agentfabric.cache import CacheEntry, CacheScope, SemanticCache, Verdict
from agentfabric.embedding import embed_text
from agentfabric.errors import FabricError, RoutingError
from agentfabric.ir import Infer, Merge, MetaProbe, Scan, VectorSearch
from agentfabric.monitoring import KPIRecord
from agentfabric.orchestration import (
    AccessModel,
    CostModel,
    PolicyState,
    RouterConfig,
    make_intent,
    note_probe_outcome,
    note_serve_outcome,
    observe_access,
    predict_prefetch,
    probe_embedding_for,
    route,
    tune_policies,
    update_cost_model,
)

DIM = 64


def kpi(engine="e1", op="Scan", latency=100, rows=10, usd=0.0):
    return KPIRecord(
        component="engine", engine_id=engine, op_kind=op, latency=latency,
        rows_or_tokens=rows, usd=usd, cache_hit=False, timestamp=0,
    )


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------

def test_first_observation_seeds_estimate():
    costs = CostModel(ema_alpha=0.2)
    update_cost_model(costs, kpi(latency=100, rows=7, usd=0.5))
    est = costs.get("e1", "Scan")
    assert est.est_latency == 100.0
    assert est.est_token_cost == 7.0
    assert est.est_usd == 0.5
    assert est.sample_count == 1


def test_ema_step_hand_example():
    costs = CostModel(ema_alpha=0.2)
    update_cost_model(costs, kpi(latency=100))
    update_cost_model(costs, kpi(latency=200))
    assert costs.get("e1", "Scan").est_latency == pytest.approx(120.0, abs=1e-9)


def test_constant_observations_converge():
    costs = CostModel(ema_alpha=0.2)
    update_cost_model(costs, kpi(latency=500))  # deliberately far initial estimate
    for _ in range(200):
        update_cost_model(costs, kpi(latency=100))
    est = costs.get("e1", "Scan")
    assert abs(est.est_latency - 100.0) <= 1e-9
    assert est.sample_count == 201


def test_geometric_error_bound():
    costs = CostModel(ema_alpha=0.2)
    update_cost_model(costs, kpi(latency=500))
    target, initial_gap = 100.0, 400.0
    for n in range(1, 60):
        update_cost_model(costs, kpi(latency=100))
        bound = (0.8**n) * initial_gap
        gap = abs(costs.get("e1", "Scan").est_latency - target)
        assert gap <= bound * (1 + 1e-9) + 1e-12


def test_negative_kpi_rejected():
    costs = CostModel()
    with pytest.raises(FabricError):
        update_cost_model(costs, kpi(latency=-1))
    with pytest.raises(FabricError):
        update_cost_model(costs, kpi(usd=-0.5))


def test_cost_snapshot_json_field_names():
    costs = CostModel(ema_alpha=0.2)
    update_cost_model(costs, kpi())
    snap = costs.snapshot_json()
    for field in ("est_latency", "est_token_cost", "est_usd", "sample_count",
                  "ema_alpha"):
        assert field in snap


# ---------------------------------------------------------------------------
# policy tuning
# ---------------------------------------------------------------------------

def test_dead_zone_leaves_policy_unchanged():
    policy = PolicyState(probe_budget=3, cache_ttl=100.0, quorum_threshold=0.75,
                         probe_useful_rate=0.5, revision_rate=0.05,
                         shared_hit_rate=0.3)
    assert tune_policies(policy) == policy


def test_probe_budget_rules():
    lo = PolicyState(probe_budget=3, probe_useful_rate=0.1)
    assert tune_policies(lo).probe_budget == 2
    hi = PolicyState(probe_budget=3, probe_useful_rate=0.7)
    assert tune_policies(hi).probe_budget == 4
    floor = PolicyState(probe_budget=1, probe_useful_rate=0.0)
    assert tune_policies(floor).probe_budget == 1
    ceil = PolicyState(probe_budget=8, probe_useful_rate=1.0)
    assert tune_policies(ceil).probe_budget == 8


def test_quorum_threshold_rules():
    up = PolicyState(quorum_threshold=0.75, revision_rate=0.2)
    assert tune_policies(up).quorum_threshold == pytest.approx(0.80)
    down = PolicyState(quorum_threshold=0.75, revision_rate=0.0)
    assert tune_policies(down).quorum_threshold == pytest.approx(0.73)
    capped = PolicyState(quorum_threshold=0.98, revision_rate=0.5)
    assert tune_policies(capped).quorum_threshold == pytest.approx(0.99)
    floored = PolicyState(quorum_threshold=0.5, revision_rate=0.0)
    assert tune_policies(floored).quorum_threshold == pytest.approx(0.5)


def test_cache_ttl_rules_and_clamps():
    grow = PolicyState(cache_ttl=100.0, revision_rate=0.05, shared_hit_rate=0.6)
    assert tune_policies(grow).cache_ttl == pytest.approx(125.0)
    shrink = PolicyState(cache_ttl=100.0, revision_rate=0.05, shared_hit_rate=0.05)
    assert tune_policies(shrink).cache_ttl == pytest.approx(80.0)
    low = PolicyState(cache_ttl=11.0, revision_rate=0.05, shared_hit_rate=0.0)
    assert tune_policies(low).cache_ttl == pytest.approx(10.0)
    high = PolicyState(cache_ttl=900.0, revision_rate=0.05, shared_hit_rate=0.9)
    assert tune_policies(high).cache_ttl == pytest.approx(1000.0)


def test_rate_ema_updates():
    p = PolicyState(probe_useful_rate=0.5, revision_rate=0.0)
    p = note_probe_outcome(p, True)
    assert p.probe_useful_rate == pytest.approx(0.6)
    p = note_serve_outcome(p, True)
    assert p.revision_rate == pytest.approx(0.2)
    p = note_serve_outcome(p, False)
    assert p.revision_rate == pytest.approx(0.16)


def test_policy_snapshot_field_names():
    snap = PolicyState().snapshot_json()
    for field in ("probe_budget", "cache_ttl", "quorum_threshold",
                  "probe_useful_rate", "revision_rate"):
        assert field in snap


@settings(max_examples=200, deadline=None)
@given(
    st.integers(min_value=1, max_value=8),
    st.floats(min_value=10.0, max_value=1000.0),
    st.floats(min_value=0.5, max_value=0.99),
    st.floats(min_value=0.0, max_value=1.0),
    st.floats(min_value=0.0, max_value=1.0),
    st.floats(min_value=0.0, max_value=1.0),
)
def test_policy_bounds_property(k, ttl, theta, pu, rev, hit):
    policy = PolicyState(
        probe_budget=k, cache_ttl=ttl, quorum_threshold=theta,
        probe_useful_rate=pu, revision_rate=rev, shared_hit_rate=hit,
    )
    for _ in range(5):
        policy = tune_policies(policy)
        assert 1 <= policy.probe_budget <= 8
        assert 0.0 < policy.quorum_threshold <= 1.0
        assert 10.0 <= policy.cache_ttl <= 1000.0


# ---------------------------------------------------------------------------
# prefetcher
# ---------------------------------------------------------------------------

def test_observe_access_counts():
    model = AccessModel()
    observe_access(model, "A", "B")
    assert model.transition_counts["A"]["B"] == 1
    observe_access(model, "A", "B")
    observe_access(model, "A", "C")
    assert model.transition_counts["A"] == {"B": 2, "C": 1}


def test_observation_conservation():
    model = AccessModel()
    seq = ["A", "B", "A", "C", "B", "B", "A"]
    for prev, nxt in zip(seq, seq[1:]):
        observe_access(model, prev, nxt)
    total = sum(c for row in model.transition_counts.values() for c in row.values())
    assert total == len(seq) - 1


def test_predict_prefetch_hand_example():
    model = AccessModel(prefetch_threshold=0.4, top_k_prefetch=2)
    observe_access(model, "A", "B")
    observe_access(model, "A", "B")
    observe_access(model, "A", "C")
    assert predict_prefetch(model, "A") == [("B", pytest.approx(2 / 3))]


def test_predict_prefetch_unseen_and_single():
    model = AccessModel()
    assert predict_prefetch(model, "zzz") == []
    observe_access(model, "A", "B")
    assert predict_prefetch(model, "A") == [("B", 1.0)]


def test_predict_prefetch_sorted_and_capped():
    model = AccessModel(prefetch_threshold=0.0, top_k_prefetch=2)
    for nxt, n in (("B", 3), ("C", 3), ("D", 1)):
        for _ in range(n):
            observe_access(model, "A", nxt)
    out = predict_prefetch(model, "A")
    assert out == [("B", pytest.approx(3 / 7)), ("C", pytest.approx(3 / 7))]


def brute_force_predict(trace, current, tau, top_k):
    counts = Counter(zip(trace, trace[1:]))
    row = {nxt: c for (prev, nxt), c in counts.items() if prev == current}
    total = sum(row.values())
    if not total:
        return []
    probs = [(r, c / total) for r, c in row.items() if c / total >= tau]
    probs.sort(key=lambda rp: (-rp[1], rp[0]))
    return probs[:top_k]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from("ABCDE"), min_size=2, max_size=200), st.data())
def test_predict_matches_brute_force_oracle(trace, data):
    model = AccessModel(prefetch_threshold=0.4, top_k_prefetch=2)
    for prev, nxt in zip(trace, trace[1:]):
        observe_access(model, prev, nxt)
    current = data.draw(st.sampled_from("ABCDEF"))
    assert predict_prefetch(model, current) == brute_force_predict(
        trace, current, 0.4, 2
    )


# ---------------------------------------------------------------------------
# router
# ---------------------------------------------------------------------------

def make_sources(costs_by_id=None):
    costs_by_id = costs_by_id or {}
    texts = {
        "alpha_db": ("structured shipment delays table", Modality.RELATIONAL),
        "beta_docs": ("customer feedback text", Modality.VECTOR),
        "gamma_stream": ("live delay events stream", Modality.STREAM),
        "delta_models": ("classification inference models", Modality.INFERENCE),
    }
    return [
        SourceDescriptor(sid, modality, embed_text(summary, DIM),
                         advertised_cost=costs_by_id.get(sid, 5.0))
        for sid, (summary, modality) in texts.items()
    ]


def intent(text="inspect shipment delays", needs=None, params=None, agent="a1"):
    return make_intent("i1", agent, text, needs or set(), params, DIM)


def test_single_source_plan_probe_plus_retrieval():
    sources = [make_sources()[0]]
    plan = route(intent(needs={Modality.RELATIONAL}), sources, PolicyState(),
                 CostModel(), config=RouterConfig())
    assert len(plan.probes) == 1
    assert plan.probes[0].decision.verdict is Verdict.PASS_THROUGH
    assert len(plan.probes[0].nodes) == 1  # single metadata probe node
    assert plan.retrieval_sources == ["alpha_db"]
    assert plan.attention.weights[0][1] == pytest.approx(1.0)


def test_pruning_latency_outlier():
    sources = make_sources({"delta_models": 50.0})  # 10x the 5.0 median
    plan = route(
        intent(needs=set()), sources, PolicyState(probe_budget=4), CostModel(),
        config=RouterConfig(prune_factor=4.0),
        probe_usefulness={s.source_id: 1.0 for s in sources},
    )
    assert [sid for sid, _ in plan.pruned] == ["delta_models"]
    assert sorted(plan.retrieval_sources) == ["alpha_db", "beta_docs", "gamma_stream"]


def test_cost_model_estimates_override_advertised():
    sources = make_sources()
    costs = CostModel()
    for _ in range(3):
        update_cost_model(costs, kpi(engine="inference-engine", op="Infer",
                                     latency=500))
    plan = route(
        intent(needs=set()), sources, PolicyState(probe_budget=4), costs,
        config=RouterConfig(prune_factor=4.0),
        probe_usefulness={s.source_id: 1.0 for s in sources},
        engine_of={"delta_models": "inference-engine"},
    )
    assert [sid for sid, _ in plan.pruned] == ["delta_models"]


def test_no_viable_sources_raises():
    sources = make_sources()
    with pytest.raises(RoutingError):
        route(intent(needs={Modality.VECTOR}), [sources[0]], PolicyState(),
              CostModel())
    with pytest.raises(RoutingError):
        route(intent(), [], PolicyState(), CostModel())


def test_duplicate_intent_sees_delay_verdicts_and_no_probe_nodes():
    sources = make_sources()
    cfg = RouterConfig()
    first = route(intent(agent="agent_a"), sources, PolicyState(), CostModel(),
                  config=cfg)
    inflight = [
        (f"p{i}", d.probe_embedding) for i, d in enumerate(first.probes)
    ]
    second = route(intent(agent="agent_b"), sources, PolicyState(), CostModel(),
                   config=cfg, inflight=inflight)
    assert second.probes, "same intent should still allocate probes"
    for directive in second.probes:
        assert directive.decision.verdict is Verdict.DELAY
        assert directive.nodes == []


def test_redirect_when_shared_cache_holds_probe_result():
    sources = make_sources()
    cfg = RouterConfig()
    shared = SemanticCache(CacheScope("shared", "fed"), 16, 0.9, DIM)
    pemb = probe_embedding_for(intent(), "alpha_db")
    shared.insert(
        CacheEntry(
            entry_id="s1", key_embedding=pemb,
            payload={"payload": {"matched": ["delays"]}},
            modality="metadata", producer_agent="x",
            created_at=0, last_hit_at=0,
        ),
        0,
    )
    plan = route(intent(), sources, PolicyState(), CostModel(), config=cfg,
                 shared_cache=shared)
    by_source = {d.source_id: d for d in plan.probes}
    assert by_source["alpha_db"].decision.verdict is Verdict.REDIRECT
    assert by_source["alpha_db"].nodes == []


def test_usefulness_gates_retrieval():
    sources = make_sources()
    plan = route(
        intent(needs=set()), sources, PolicyState(probe_budget=4), CostModel(),
        probe_usefulness={
            "alpha_db": 1.0, "beta_docs": 0.0, "gamma_stream": 1.0,
            "delta_models": 0.0,
        },
    )
    assert sorted(plan.retrieval_sources) == ["alpha_db", "gamma_stream"]
    assert plan.expectation is not None
    assert plan.expectation.expected_sources == {"alpha_db", "gamma_stream"}
    assert plan.expectation.expected_modalities == {
        Modality.RELATIONAL, Modality.STREAM,
    }


def test_attention_disabled_retrieves_everything():
    sources = make_sources()
    plan = route(intent(needs=set()), sources, PolicyState(), CostModel(),
                 attention_enabled=False)
    assert plan.probes == []
    assert plan.pruned == []
    assert sorted(plan.retrieval_sources) == sorted(s.source_id for s in sources)
    for _sid, w in plan.attention.weights:
        assert w == pytest.approx(0.25)


def test_plan_overrides_replace_default_nodes():
    sources = [make_sources()[0]]
    node = Scan(node_id="custom", source="alpha_db", predicate="status='delivered'")
    plan = route(
        intent(needs={Modality.RELATIONAL}, params={"plan_overrides": {"alpha_db": node}}),
        sources, PolicyState(), CostModel(),
        probe_usefulness={"alpha_db": 1.0},
    )
    assert plan.retrieval_nodes == [node]


def test_default_nodes_per_modality():
    sources = make_sources()
    plan = route(
        intent(needs=set(), params={"model_id": "m1", "input_text": "hello",
                                    "vector_k": 3}),
        sources, PolicyState(probe_budget=4), CostModel(),
        probe_usefulness={s.source_id: 1.0 for s in sources},
    )
    nodes = {sid: n for sid, n in plan.retrieval}
    assert isinstance(nodes["alpha_db"], Scan)
    assert isinstance(nodes["beta_docs"], VectorSearch) and nodes["beta_docs"].k == 3
    assert isinstance(nodes["gamma_stream"], Scan)
    inf = nodes["delta_models"]
    assert isinstance(inf, Infer) and inf.model_id == "m1" and inf.input_ref == "hello"
    # multi-target plans end in a Merge joining the retrieval nodes
    merge = [n for n in plan.plan.nodes if isinstance(n, Merge)]
    assert len(merge) == 1 and len(merge[0].inputs) == 4


def test_route_is_deterministic():
    sources = make_sources()
    a = route(intent(), sources, PolicyState(), CostModel())
    b = route(intent(), sources, PolicyState(), CostModel())
    assert a.attention.weights == b.attention.weights
    assert a.retrieval_sources == b.retrieval_sources
    assert [n.node_id for n in a.plan.nodes] == [n.node_id for n in b.plan.nodes]


def test_probe_nodes_only_for_pass_through_property():
    sources = make_sources()
    emb = probe_embedding_for(intent(), "beta_docs")
    plan = route(intent(), sources, PolicyState(probe_budget=4), CostModel(),
                 inflight=[("px", emb)])
    for directive in plan.probes:
        if directive.decision.verdict is not Verdict.PASS_THROUGH:
            assert directive.nodes == []
        else:
            assert len(directive.nodes) == 1
