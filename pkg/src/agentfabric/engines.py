"""Simulated backend engines behind the minimal IR.

Four engine families cover the fabric's modalities: an in-memory
relational store (filter/group/avg/count), an exact brute-force vector
store, a replayable event stream, and a keyword-rule inference service.
``compile`` lowers an IR node into an engine-native op (validating kind
support and parsing predicates); ``execute`` runs it against engine state
and prices it through a seeded latency model, so simulated cost is a pure
function of (engine, op, input size, seed).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

from agentfabric import kernels
from agentfabric.attention import Modality
from agentfabric.embedding import embed_text, token_hash
from agentfabric.errors import EngineError, FabricError, UnsupportedOpError
from agentfabric.ir import (
    Aggregate,
    Infer,
    MetaProbe,
    PlanNode,
    Predicate,
    Scan,
    VectorSearch,
    eval_predicate,
    like_match,
    parse_predicate,
)
from agentfabric.monitoring import KPIRecord
from agentfabric.quorum import PartialResult


@dataclass(frozen=True)
class EngineDescriptor:
    engine_id: str
    modality: Modality
    supported_kinds: frozenset[str]
    op_latency: dict[str, tuple[int, float]]  # kind -> (base ticks, per-row)
    jitter_span: int = 0


@dataclass(frozen=True)
class NativeOp:
    engine_id: str
    node: PlanNode
    predicate: Predicate | None = None
    child_predicate: Predicate | None = None


@dataclass
class ExecOutcome:
    payload: dict
    summary: str
    rows: int
    usd: float = 0.0
    latency_override: int | None = None


def node_source(node: PlanNode) -> str | None:
    """The data source a node addresses (an Aggregate's lives on its child)."""
    if isinstance(node, Aggregate):
        return node.child.source
    return getattr(node, "source", None)


def simulated_latency(
    desc: EngineDescriptor, op_kind: str, rows: int, seed: int
) -> int:
    """base + per-row cost + small seeded jitter; deterministic."""
    base, per_row = desc.op_latency.get(op_kind, (1, 0.0))
    jitter = 0
    if desc.jitter_span > 0:
        jitter = token_hash(f"{desc.engine_id}|{op_kind}|{rows}|{seed}") % (
            desc.jitter_span + 1
        )
    return base + int(per_row * rows) + jitter


class Engine:
    """Shared compile/execute scaffolding for the four engine families."""

    def __init__(self, descriptor: EngineDescriptor, tags: list[str] | None = None):
        self.descriptor = descriptor
        self.tags = list(tags or [])

    @property
    def engine_id(self) -> str:
        return self.descriptor.engine_id

    def metadata_names(self) -> list[str]:
        raise NotImplementedError

    def run(self, native: NativeOp, now: int) -> ExecOutcome:
        raise NotImplementedError

    def _run_meta_probe(self, node: MetaProbe) -> ExecOutcome:
        # a whitespace-separated pattern list matches when any piece matches
        patterns = node.name_pattern.split()
        matched = sorted(
            name
            for name in self.metadata_names()
            if any(like_match(p, name) for p in patterns)
        )
        payload = {
            "op": "meta_probe",
            "source": node.source,
            "pattern": node.name_pattern,
            "matched": matched,
        }
        summary = f"metadata {node.source} " + (" ".join(matched) if matched else "none")
        return ExecOutcome(payload=payload, summary=summary, rows=len(matched))


def compile(node: PlanNode, engine: Engine) -> NativeOp:
    """Lower an IR node for one engine; parsing happens here, not at run time."""
    desc = engine.descriptor
    if node.kind not in desc.supported_kinds:
        raise UnsupportedOpError(node.kind, desc.engine_id)
    predicate = child_predicate = None
    if isinstance(node, Scan):
        predicate = parse_predicate(node.predicate)
    elif isinstance(node, Aggregate):
        child_predicate = parse_predicate(node.child.predicate)
    return NativeOp(
        engine_id=desc.engine_id,
        node=node,
        predicate=predicate,
        child_predicate=child_predicate,
    )


# ---------------------------------------------------------------------------
# relational engine
# ---------------------------------------------------------------------------

TIMESTAMP = "timestamp"


@dataclass
class Table:
    name: str
    columns: list[str]
    col_types: dict[str, str]  # int | float | str | timestamp
    rows: list[dict] = field(default_factory=list)

    def sample(self, n: int = 5) -> list[dict]:
        """First n rows in record order (LIMIT-n semantics)."""
        return self.rows[:n]

    def timestamp_columns(self) -> list[str]:
        return [c for c in self.columns if self.col_types[c] == TIMESTAMP]


def _parse_timestamp(raw: str) -> int | None:
    try:
        dt = datetime.fromisoformat(raw)
    except ValueError:
        return None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp() // 60)  # minutes since epoch


def _infer_column(values: list[str]) -> tuple[str, list]:
    def all_parse(fn):
        out = []
        for v in values:
            p = fn(v)
            if p is None:
                return None
            out.append(p)
        return out

    def as_int(v):
        try:
            return int(v)
        except ValueError:
            return None

    def as_float(v):
        try:
            return float(v)
        except ValueError:
            return None

    parsed = all_parse(as_int)
    if parsed is not None:
        return "int", parsed
    parsed = all_parse(as_float)
    if parsed is not None:
        return "float", parsed
    parsed = all_parse(_parse_timestamp)
    if parsed is not None:
        return TIMESTAMP, parsed
    return "str", list(values)


def load_table_csv(path: str | Path, name: str | None = None) -> Table:
    """Load a CSV fixture, inferring int/float/timestamp/str column types.

    ISO datetimes become integer minutes since epoch and keep a
    'timestamp' type tag that the probing agents look for.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FabricError(f"empty fixture {path}") from None
        raw_rows = [row for row in reader if row]
    cols = [c.strip() for c in header]
    col_values = {c: [row[i].strip() for row in raw_rows] for i, c in enumerate(cols)}
    col_types = {}
    parsed_cols = {}
    for c in cols:
        col_types[c], parsed_cols[c] = _infer_column(col_values[c])
    rows = [
        {c: parsed_cols[c][i] for c in cols} for i in range(len(raw_rows))
    ]
    return Table(name=name or path.stem, columns=cols, col_types=col_types, rows=rows)


class RelationalEngine(Engine):
    def __init__(self, descriptor: EngineDescriptor, source_id: str,
                 tags: list[str] | None = None):
        super().__init__(descriptor, tags)
        self.source_id = source_id
        self.tables: dict[str, Table] = {}

    def add_table(self, table: Table) -> None:
        self.tables[table.name] = table

    def metadata_names(self) -> list[str]:
        names = [self.source_id] + self.tags
        for t in self.tables.values():
            names.append(t.name)
            names.extend(t.columns)
        return names

    def resolve_table(self, source: str) -> Table:
        if source in self.tables:
            return self.tables[source]
        if source == self.source_id and len(self.tables) == 1:
            return next(iter(self.tables.values()))
        raise EngineError(f"unknown table {source!r} in {self.engine_id}")

    @staticmethod
    def _field_value(row: dict, expr: str) -> float:
        if "-" in expr:
            left, right = expr.split("-", 1)
            return float(row[left.strip()]) - float(row[right.strip()])
        return float(row[expr])

    def _scan_rows(self, table: Table, predicate: Predicate | None,
                   limit: int | None) -> list[dict]:
        rows = [r for r in table.rows if eval_predicate(predicate, r)]
        return rows[:limit] if limit is not None else rows

    def run(self, native: NativeOp, now: int) -> ExecOutcome:
        node = native.node
        if isinstance(node, MetaProbe):
            return self._run_meta_probe(node)
        if isinstance(node, Scan):
            table = self.resolve_table(node.source)
            rows = self._scan_rows(table, native.predicate, node.limit)
            payload = {"op": "scan", "source": table.name, "rows": rows}
            summary = f"rows {table.name} " + " ".join(table.columns)
            return ExecOutcome(payload=payload, summary=summary, rows=len(rows))
        if isinstance(node, Aggregate):
            table = self.resolve_table(node.child.source)
            rows = self._scan_rows(table, native.child_predicate, node.child.limit)
            groups: dict[Any, list[float]] = {}
            for r in rows:
                try:
                    groups.setdefault(r[node.group_key], []).append(
                        self._field_value(r, node.field)
                    )
                except KeyError as exc:
                    raise EngineError(f"unknown column {exc}") from None
            if node.agg == "avg":
                out = {k: sum(v) / len(v) for k, v in groups.items()}
            else:
                out = {k: len(v) for k, v in groups.items()}
            ordered = {k: out[k] for k in sorted(out, key=str)}
            payload = {
                "op": "aggregate",
                "source": table.name,
                "group_key": node.group_key,
                "agg": node.agg,
                "field": node.field,
                "groups": ordered,
            }
            summary = (
                f"{node.agg} {node.field} by {node.group_key} "
                + " ".join(str(k) for k in ordered)
            )
            return ExecOutcome(payload=payload, summary=summary, rows=len(rows))
        raise UnsupportedOpError(node.kind, self.engine_id)


# ---------------------------------------------------------------------------
# vector engine
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VectorRecord:
    record_id: str
    embedding: np.ndarray
    payload: dict


class VectorEngine(Engine):
    def __init__(self, descriptor: EngineDescriptor, collection: str,
                 tags: list[str] | None = None):
        super().__init__(descriptor, tags)
        self.collection = collection
        self.records: list[VectorRecord] = []
        self._matrix: np.ndarray | None = None
        self.fields: list[str] = []

    def add_records(self, records: list[VectorRecord]) -> None:
        self.records.extend(records)
        self.records.sort(key=lambda r: r.record_id)
        self._matrix = None
        for r in records:
            for k in r.payload:
                if k not in self.fields:
                    self.fields.append(k)

    def metadata_names(self) -> list[str]:
        return [self.collection] + self.tags + sorted(self.fields)

    def _keys(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.stack([r.embedding for r in self.records])
        return self._matrix

    def top_k(self, query: np.ndarray, k: int) -> list[tuple[VectorRecord, float]]:
        """Exact brute-force top-k by cosine; ties resolve to the smaller id."""
        if not self.records:
            return []
        sims = kernels.similarities(self._keys(), query)
        idx = kernels.top_k(sims, k)
        return [(self.records[i], float(sims[i])) for i in idx]

    def run(self, native: NativeOp, now: int) -> ExecOutcome:
        node = native.node
        if isinstance(node, MetaProbe):
            return self._run_meta_probe(node)
        if isinstance(node, VectorSearch):
            if node.source != self.collection:
                raise EngineError(f"unknown collection {node.source!r}")
            hits = self.top_k(node.query_embedding, node.k)
            payload = {
                "op": "vector_search",
                "source": self.collection,
                "hits": [
                    {"record_id": r.record_id, "similarity": sim, "payload": r.payload}
                    for r, sim in hits
                ],
            }
            texts = " ".join(str(r.payload.get("text", "")) for r, _ in hits)
            summary = f"feedback {self.collection} {texts}"
            return ExecOutcome(payload=payload, summary=summary, rows=len(self.records))
        raise UnsupportedOpError(node.kind, self.engine_id)


# ---------------------------------------------------------------------------
# stream engine
# ---------------------------------------------------------------------------

class StreamEngine(Engine):
    def __init__(self, descriptor: EngineDescriptor, stream_id: str,
                 tags: list[str] | None = None):
        super().__init__(descriptor, tags)
        self.stream_id = stream_id
        self.events: list[dict] = []

    def add_events(self, events: list[dict]) -> None:
        for e in events:
            if "timestamp" not in e:
                raise FabricError(f"stream event missing timestamp: {e}")
        self.events.extend(events)
        self.events.sort(key=lambda e: (e["timestamp"], json.dumps(e, sort_keys=True)))

    def metadata_names(self) -> list[str]:
        fields: list[str] = []
        for e in self.events:
            for k in e:
                if k not in fields:
                    fields.append(k)
        return [self.stream_id] + self.tags + sorted(fields)

    def run(self, native: NativeOp, now: int) -> ExecOutcome:
        node = native.node
        if isinstance(node, MetaProbe):
            return self._run_meta_probe(node)
        if isinstance(node, Scan):
            if node.source != self.stream_id:
                raise EngineError(f"unknown stream {node.source!r}")
            matched = [
                e for e in self.events
                if e["timestamp"] <= now and eval_predicate(native.predicate, e)
            ]
            if node.limit is not None:
                matched = matched[: node.limit]
            payload = {"op": "stream_replay", "source": self.stream_id, "events": matched}
            kinds = sorted({str(e.get("event_type", "")) for e in matched})
            regions = sorted({str(e.get("region", "")) for e in matched})
            summary = f"stream events {' '.join(kinds)} {' '.join(regions)}"
            return ExecOutcome(payload=payload, summary=summary, rows=len(matched))
        raise UnsupportedOpError(node.kind, self.engine_id)


# ---------------------------------------------------------------------------
# inference engine
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Rule:
    keyword: str
    label: str
    score: float


@dataclass(frozen=True)
class ModelSpec:
    model_id: str
    rules: tuple[Rule, ...]
    base_latency: int
    usd_per_call: float
    fallback_label: str = "unknown"
    fallback_score: float = 0.5


class InferenceEngine(Engine):
    def __init__(self, descriptor: EngineDescriptor, service_id: str,
                 models: list[ModelSpec], tags: list[str] | None = None):
        super().__init__(descriptor, tags)
        self.service_id = service_id
        self.models = {m.model_id: m for m in models}

    def metadata_names(self) -> list[str]:
        names = [self.service_id] + self.tags
        for m in self.models.values():
            names.append(m.model_id)
            names.extend(r.label for r in m.rules)
        return names

    def classify(self, model: ModelSpec, text: str) -> tuple[str, float]:
        lowered = text.lower()
        for rule in model.rules:
            if rule.keyword in lowered:
                return rule.label, rule.score
        return model.fallback_label, model.fallback_score

    def run(self, native: NativeOp, now: int) -> ExecOutcome:
        node = native.node
        if isinstance(node, MetaProbe):
            return self._run_meta_probe(node)
        if isinstance(node, Infer):
            model = self.models.get(node.model_id)
            if model is None:
                raise EngineError(f"unknown model {node.model_id!r}")
            label, score = self.classify(model, node.input_ref)
            tokens = len(node.input_ref.split())
            payload = {
                "op": "infer",
                "source": self.service_id,
                "model_id": node.model_id,
                "label": label,
                "score": score,
                "token_cost": tokens,
            }
            summary = f"inference {node.model_id} label {label}"
            return ExecOutcome(
                payload=payload,
                summary=summary,
                rows=tokens,
                usd=model.usd_per_call,
                latency_override=model.base_latency,
            )
        raise UnsupportedOpError(node.kind, self.engine_id)


# ---------------------------------------------------------------------------
# fabric: source registry + execution wrapper
# ---------------------------------------------------------------------------

class EngineFabric:
    """Source registry plus the compile/execute/KPI wrapper around engines."""

    def __init__(self, dim: int, seed: int):
        self.dim = dim
        self.seed = seed
        self.engines: dict[str, Engine] = {}
        self.source_to_engine: dict[str, str] = {}

    def register(self, engine: Engine, source_ids: list[str]) -> None:
        self.engines[engine.engine_id] = engine
        for sid in source_ids:
            self.source_to_engine[sid] = engine.engine_id

    def engine_for_source(self, source: str) -> Engine:
        engine_id = self.source_to_engine.get(source)
        if engine_id is None:
            raise EngineError(f"unknown source {source!r}")
        return self.engines[engine_id]

    def engine_map(self) -> dict[str, str]:
        return dict(self.source_to_engine)

    def compile_node(self, node: PlanNode) -> NativeOp:
        source = node_source(node)
        if source is None:
            raise UnsupportedOpError(node.kind, "<fabric>")
        return compile(node, self.engine_for_source(source))

    def execute(
        self, native: NativeOp, query_id: str, now: int,
        source_id: str | None = None,
    ) -> tuple[PartialResult, KPIRecord]:
        """Run a native op; the result 'arrives' after its simulated latency.

        ``source_id`` overrides the result attribution when a plan node
        addresses a table/collection rather than its logical source.
        """
        engine = self.engines[native.engine_id]
        outcome = engine.run(native, now)
        if outcome.latency_override is not None:
            latency = outcome.latency_override
        else:
            latency = simulated_latency(
                engine.descriptor, native.node.kind, outcome.rows, self.seed
            )
        arrived = now + latency
        result = PartialResult(
            query_id=query_id,
            source_id=source_id or node_source(native.node),
            modality=engine.descriptor.modality,
            payload=outcome.payload,
            result_embedding=embed_text(outcome.summary, self.dim),
            arrived_at=arrived,
        )
        kpi = KPIRecord(
            component="engine",
            engine_id=native.engine_id,
            op_kind=native.node.kind,
            latency=latency,
            rows_or_tokens=outcome.rows,
            usd=outcome.usd,
            cache_hit=False,
            timestamp=arrived,
        )
        return result, kpi


def load_jsonl(path: str | Path) -> list[dict]:
    out = []
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
