import numpy as np
import pytest

from agentfabric.errors import FabricError, PredicateError
from agentfabric.ir import (
    Aggregate,
    ExecutionPlan,
    Merge,
    MetaProbe,
    PlanBuilder,
    Scan,
    VectorSearch,
    eval_predicate,
    like_match,
    parse_predicate,
    validate_plan,
)


def test_predicate_string_forms():
    p = parse_predicate("status='delivered'")
    assert (p.field, p.op, p.value) == ("status", "=", "delivered")
    p = parse_predicate('region="Southeast Asia"')
    assert p.value == "Southeast Asia"
    p = parse_predicate("delay_min >= 45")
    assert (p.op, p.value) == (">=", 45)
    p = parse_predicate("score<0.5")
    assert (p.op, p.value) == ("<", 0.5)
    assert parse_predicate(None) is None


@pytest.mark.parametrize("bad", ["", "status", "= 5", "status ~ 'x'", "a = "])
def test_malformed_predicates_raise(bad):
    with pytest.raises(PredicateError):
        parse_predicate(bad)


def test_eval_predicate_semantics():
    row = {"status": "delivered", "delay": 30}
    assert eval_predicate(parse_predicate("status='delivered'"), row)
    assert not eval_predicate(parse_predicate("status='lost'"), row)
    assert eval_predicate(parse_predicate("delay>=30"), row)
    assert not eval_predicate(parse_predicate("delay<30"), row)
    assert eval_predicate(None, row)
    assert not eval_predicate(parse_predicate("missing=1"), row)
    # incomparable types fail closed rather than raising mid-scan
    assert not eval_predicate(parse_predicate("status<5"), row)


def test_like_match():
    assert like_match("%delay%", "act_delivery_delay")
    assert like_match("%delivery%", "act_delivery")
    assert like_match("%DELAY%", "Customs Delay")
    assert not like_match("%delays%", "delay_min")
    assert like_match("ship_id", "ship_id")
    assert like_match("s____id", "ship_id")  # _ matches exactly one char
    assert not like_match("%zebra%", "shipments")


def test_plan_builder_ids_are_deterministic():
    b = PlanBuilder("q1")
    assert [b.next_id() for _ in range(3)] == ["q1.n1", "q1.n2", "q1.n3"]


def test_aggregate_requires_known_agg():
    child = Scan(node_id="n1", source="t")
    with pytest.raises(FabricError):
        Aggregate(node_id="n2", child=child, group_key="g", agg="median", field="x")


def test_walk_and_validate_dag():
    b = PlanBuilder("p")
    scan = Scan(node_id=b.next_id(), source="t")
    agg = Aggregate(node_id=b.next_id(), child=scan, group_key="g", agg="avg",
                    field="x")
    probe = MetaProbe(node_id=b.next_id(), source="t", name_pattern="%x%")
    merge = Merge(node_id=b.next_id(), inputs=[agg, probe])
    plan = ExecutionPlan(plan_id="p", nodes=[merge])
    validate_plan(plan)
    kinds = [n.kind for n in plan.walk()]
    assert kinds == ["Merge", "Aggregate", "Scan", "MetaProbe"]


def test_validate_rejects_cycles():
    b = PlanBuilder("p")
    merge = Merge(node_id=b.next_id(), inputs=[])
    inner = Merge(node_id=b.next_id(), inputs=[merge])
    merge.inputs.append(inner)  # mutate a cycle into place
    with pytest.raises(FabricError):
        validate_plan(ExecutionPlan(plan_id="p", nodes=[merge]))


def test_only_merge_may_fan_out():
    class Fanout(Scan):
        def children(self):
            return [Scan(node_id="c1", source="t"), Scan(node_id="c2", source="t")]

    bad = Fanout(node_id="f", source="t")
    with pytest.raises(FabricError):
        validate_plan(ExecutionPlan(plan_id="p", nodes=[bad]))


def test_vector_search_node_holds_embedding():
    emb = np.zeros(8)
    emb[0] = 1.0
    node = VectorSearch(node_id="v", source="docs", query_embedding=emb, k=3)
    assert node.kind == "VectorSearch"
    assert node.children() == []
