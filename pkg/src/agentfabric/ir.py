"""Engine-agnostic plan representation compiled on demand per engine.

Nodes state what to do and in what order, not how an engine does it:
metadata probes, scans with simple predicates, single-child aggregates,
exact vector search, rule-model inference, and a merge node that joins
subresults. Plans are DAGs; Merge is the only node with multiple children
and Aggregate has exactly one.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Union

import numpy as np

from agentfabric.errors import FabricError, PredicateError


@dataclass(kw_only=True)
class PlanNode:
    node_id: str
    requires_exact: bool = False

    @property
    def kind(self) -> str:
        return type(self).__name__

    def children(self) -> list["PlanNode"]:
        return []


@dataclass(kw_only=True)
class MetaProbe(PlanNode):
    source: str
    name_pattern: str  # SQL-LIKE style, e.g. '%delay%'


@dataclass(kw_only=True)
class Scan(PlanNode):
    source: str
    predicate: str | None = None
    limit: int | None = None


@dataclass(kw_only=True)
class Aggregate(PlanNode):
    child: Scan
    group_key: str
    agg: str  # 'avg' | 'count'
    field: str  # column, or 'colA-colB' difference

    def __post_init__(self):
        if self.agg not in ("avg", "count"):
            raise FabricError(f"unknown aggregate {self.agg!r}")

    def children(self) -> list[PlanNode]:
        return [self.child]


@dataclass(kw_only=True)
class VectorSearch(PlanNode):
    source: str
    query_embedding: np.ndarray
    k: int


@dataclass(kw_only=True)
class Infer(PlanNode):
    source: str
    model_id: str
    input_ref: str  # inline input text


@dataclass(kw_only=True)
class Merge(PlanNode):
    inputs: list[PlanNode] = field(default_factory=list)

    def children(self) -> list[PlanNode]:
        return list(self.inputs)


@dataclass
class ExecutionPlan:
    plan_id: str
    nodes: list[PlanNode]

    def walk(self) -> list[PlanNode]:
        """All reachable nodes, depth-first from the top-level list."""
        seen: list[PlanNode] = []
        ids = set()

        def visit(node: PlanNode):
            if id(node) in ids:
                return
            ids.add(id(node))
            seen.append(node)
            for c in node.children():
                visit(c)

        for n in self.nodes:
            visit(n)
        return seen


def validate_plan(plan: ExecutionPlan) -> None:
    """Reject cycles and structurally broken nodes."""
    in_progress: set[int] = set()
    done: set[int] = set()

    def visit(node: PlanNode):
        if id(node) in done:
            return
        if id(node) in in_progress:
            raise FabricError(f"plan {plan.plan_id}: cycle through {node.node_id}")
        in_progress.add(id(node))
        kids = node.children()
        if len(kids) > 1 and not isinstance(node, Merge):
            raise FabricError(f"{node.node_id}: only Merge may have multiple children")
        for c in kids:
            visit(c)
        in_progress.discard(id(node))
        done.add(id(node))

    for n in plan.nodes:
        visit(n)


class PlanBuilder:
    """Deterministic node-id factory for one plan."""

    def __init__(self, prefix: str):
        self.prefix = prefix
        self._n = 0

    def next_id(self) -> str:
        self._n += 1
        return f"{self.prefix}.n{self._n}"


# ---------------------------------------------------------------------------
# scan predicates
# ---------------------------------------------------------------------------

_PRED_RE = re.compile(
    r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(<=|>=|!=|=|<|>)\s*(.+?)\s*$"
)

Value = Union[str, int, float]


@dataclass(frozen=True)
class Predicate:
    field: str
    op: str
    value: Value


def parse_predicate(text: str | None) -> Predicate | None:
    """Parse ``field OP value``; values are quoted strings or numbers."""
    if text is None:
        return None
    m = _PRED_RE.match(text)
    if not m:
        raise PredicateError(f"malformed predicate: {text!r}")
    fieldname, op, raw = m.groups()
    value: Value
    if (raw.startswith("'") and raw.endswith("'") and len(raw) >= 2) or (
        raw.startswith('"') and raw.endswith('"') and len(raw) >= 2
    ):
        value = raw[1:-1]
    else:
        try:
            value = int(raw)
        except ValueError:
            try:
                value = float(raw)
            except ValueError:
                raise PredicateError(f"malformed predicate value: {raw!r}") from None
    return Predicate(fieldname, op, value)


def eval_predicate(pred: Predicate | None, row: dict) -> bool:
    if pred is None:
        return True
    if pred.field not in row:
        return False
    have = row[pred.field]
    want = pred.value
    if pred.op == "=":
        return have == want
    if pred.op == "!=":
        return have != want
    try:
        if pred.op == "<":
            return have < want
        if pred.op == "<=":
            return have <= want
        if pred.op == ">":
            return have > want
        if pred.op == ">=":
            return have >= want
    except TypeError:
        return False
    raise PredicateError(f"unknown operator {pred.op!r}")


def like_match(pattern: str, name: str) -> bool:
    """SQL-LIKE match, case-insensitive; % = any run, _ = one char."""
    rx = re.escape(pattern.lower()).replace("%", ".*").replace("_", ".")
    return re.fullmatch(rx, name.lower()) is not None
