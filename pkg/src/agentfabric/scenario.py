"""Deterministic event loop tying agents, fabric, caches and quorum together.

Everything runs on one logical clock: callbacks are ordered by (tick,
insertion sequence), engines "complete" work after their simulated
latency, and no wall-clock or unseeded randomness exists anywhere. A
scenario run is therefore a pure function of (config, seed) and two runs
with the same inputs produce byte-identical reports.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from agentfabric import agents as agent_mod
from agentfabric.agents import (
    AnomalyDetectionAgent,
    ForecastingAgent,
    OrchestratorAgent,
    RootCauseAgent,
    RoutingOptimizationAgent,
    SentimentAnalysisAgent,
)
from agentfabric.attention import Modality, SourceDescriptor, update_attention
from agentfabric.bus import Bus, make_message
from agentfabric.cache import (
    CacheEntry,
    CacheScope,
    SemanticCache,
    Verdict,
    detect_overlap,
)
from agentfabric.embedding import embed_text
from agentfabric.engines import (
    EngineDescriptor,
    EngineFabric,
    InferenceEngine,
    ModelSpec,
    RelationalEngine,
    Rule,
    StreamEngine,
    VectorEngine,
    VectorRecord,
    load_jsonl,
    load_table_csv,
)
from agentfabric.errors import ConfigError, RoutingError
from agentfabric.ir import (
    Aggregate,
    Infer,
    MetaProbe,
    PlanNode,
    Scan,
    VectorSearch,
    validate_plan,
)
from agentfabric.monitoring import (
    KPILog,
    KPIRecord,
    backend_executions,
    record_kpi,
    total_latency,
    total_usd,
)
from agentfabric.orchestration import (
    AccessModel,
    CostModel,
    PolicyState,
    QueryIntent,
    RouterConfig,
    make_intent,
    note_probe_outcome,
    note_serve_outcome,
    note_shared_hit_rate,
    observe_access,
    predict_prefetch,
    route,
    tune_policies,
    update_cost_model,
)
from agentfabric.quorum import (
    PartialResult,
    QuorumState,
    accept_partial,
    maybe_serve,
    revise,
    serve_full,
)

FEATURES = frozenset(
    {"attention", "micro_cache", "shared_cache", "prefetch", "quorum", "optimizer"}
)

REPORT_FIELDS = (
    "backend_query_count",
    "probe_count",
    "suppressed_probe_count",
    "micro_cache_hit_rate",
    "shared_cache_hit_rate",
    "total_simulated_latency",
    "total_usd",
    "quorum_early_serve_count",
    "revision_count",
    "final_routing_decision",
)


# ---------------------------------------------------------------------------
# event loop
# ---------------------------------------------------------------------------

class EventLoop:
    """Min-heap of (tick, seq, callback); seq keeps same-tick order stable."""

    def __init__(self):
        self._queue: list[tuple[int, int, Callable[[], None]]] = []
        self._seq = 0
        self.now = 0

    def schedule_at(self, tick: int, fn: Callable[[], None]) -> None:
        if tick < self.now:
            raise ValueError(f"cannot schedule in the past ({tick} < {self.now})")
        heapq.heappush(self._queue, (tick, self._seq, fn))
        self._seq += 1

    def schedule(self, delay: int, fn: Callable[[], None]) -> None:
        self.schedule_at(self.now + delay, fn)

    def run(self) -> None:
        while self._queue:
            tick, _seq, fn = heapq.heappop(self._queue)
            self.now = tick
            fn()


# ---------------------------------------------------------------------------
# scenario config
# ---------------------------------------------------------------------------

@dataclass
class ScenarioConfig:
    name: str
    seed: int
    dim: int
    features: frozenset[str]
    fixtures: dict[str, Path]
    thresholds: dict[str, Any]
    router: dict[str, Any]
    policy: dict[str, Any]
    caches: dict[str, Any]
    prefetch: dict[str, Any]
    agents: dict[str, Any]
    sources: list[dict[str, Any]]

    @classmethod
    def from_file(cls, path: str | Path) -> "ScenarioConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read scenario {path}: {exc}") from exc
        features = parse_features(raw.get("features", []))
        fixtures = {}
        for key, rel in raw.get("fixtures", {}).items():
            fpath = (path.parent / rel).resolve()
            if not fpath.is_file():
                raise ConfigError(f"missing fixture {rel!r} (looked at {fpath})")
            fixtures[key] = fpath
        for required in ("shipments_csv", "cust_feedback_jsonl", "live_stream_jsonl"):
            if required not in fixtures:
                raise ConfigError(f"scenario must name fixture {required!r}")
        return cls(
            name=raw.get("name", path.stem),
            seed=int(raw.get("seed", 0)),
            dim=int(raw.get("dim", 64)),
            features=features,
            fixtures=fixtures,
            thresholds=raw.get("thresholds", {}),
            router=raw.get("router", {}),
            policy=raw.get("policy", {}),
            caches=raw.get("caches", {}),
            prefetch=raw.get("prefetch", {}),
            agents=raw.get("agents", {}),
            sources=raw.get("sources", []),
        )


def parse_features(spec: Any) -> frozenset[str]:
    """Accept 'all', 'none', a comma list, or a JSON list of flags."""
    if isinstance(spec, str):
        if spec == "all":
            return frozenset(FEATURES)
        if spec in ("none", ""):
            return frozenset()
        spec = [s.strip() for s in spec.split(",") if s.strip()]
    flags = frozenset(spec)
    unknown = flags - FEATURES
    if unknown:
        raise ConfigError(f"unknown feature flag(s): {', '.join(sorted(unknown))}")
    return flags


# ---------------------------------------------------------------------------
# scenario report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioReport:
    backend_query_count: int
    probe_count: int
    suppressed_probe_count: int
    micro_cache_hit_rate: float
    shared_cache_hit_rate: float
    total_simulated_latency: int
    total_usd: float
    quorum_early_serve_count: int
    revision_count: int
    final_routing_decision: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        rows = [(name, getattr(self, name)) for name in REPORT_FIELDS]
        width = max(len(name) for name, _ in rows)
        lines = []
        for name, value in rows:
            if isinstance(value, dict):
                value = json.dumps(value, sort_keys=True)
            lines.append(f"{name.ljust(width)}  {value}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "value"])
        for name in REPORT_FIELDS:
            value = getattr(self, name)
            if isinstance(value, dict):
                value = json.dumps(value, sort_keys=True)
            writer.writerow([name, value])
        return buf.getvalue()

    def render(self, fmt: str) -> str:
        if fmt == "json":
            return self.to_json()
        if fmt == "table":
            return self.to_table()
        if fmt == "csv":
            return self.to_csv()
        raise ConfigError(f"unknown format {fmt!r}")

    @classmethod
    def from_json(cls, text: str) -> "ScenarioReport":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"unparsable report: {exc}") from exc
        if not isinstance(raw, dict) or set(raw) != set(REPORT_FIELDS):
            raise ConfigError("report is missing required fields")
        return cls(**raw)


# ---------------------------------------------------------------------------
# per-intent bookkeeping
# ---------------------------------------------------------------------------

@dataclass
class _IntentContext:
    intent: QueryIntent
    on_answer: Callable[[dict], None]
    expectation: Any
    state: QuorumState
    weights_of: dict[str, float]
    finalized: bool = False
    revised: bool = False


@dataclass
class _InflightProbe:
    embedding: np.ndarray
    waiters: list[Callable[[float, dict], None]] = field(default_factory=list)


@dataclass(eq=False)
class _PendingFetch:
    key: np.ndarray
    kind: str
    partial: PartialResult
    waiters: list[tuple["_IntentContext", str]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# runtime
# ---------------------------------------------------------------------------

class FabricRuntime:
    """One scenario run: engines, caches, router state, agents, event loop."""

    def __init__(self, config: ScenarioConfig, seed: int | None = None):
        self.config = config
        self.seed = config.seed if seed is None else seed
        self.dim = config.dim
        self.features = config.features
        self.loop = EventLoop()

        th = config.thresholds
        self.tau_c = float(th.get("tau_c", 0.9))
        self.tau_o = float(th.get("tau_o", 0.5))
        self.tau_p = float(th.get("tau_p", 0.4))
        self.conf_weights = tuple(th.get("confidence_weights", (0.4, 0.2, 0.4)))
        self.agreement_prior = float(th.get("agreement_prior", 0.5))
        self.revision_bound = float(th.get("revision_bound", 0.6))

        self.router_config = RouterConfig(
            tau_a=float(th.get("tau_a", 0.25)),
            tau_s=float(th.get("tau_s", 0.9)),
            prune_factor=float(config.router.get("prune_factor", 4.0)),
            usefulness_cutoff=float(config.router.get("usefulness_cutoff", 0.5)),
            high_weight_cutoff=float(config.router.get("high_weight_cutoff", 0.5)),
            vector_k=int(config.router.get("vector_k", 5)),
        )
        self.policy = PolicyState(
            probe_budget=int(config.policy.get("probe_budget", 3)),
            cache_ttl=float(config.policy.get("cache_ttl", 100.0)),
            quorum_threshold=float(th.get("theta_q", 0.75)),
        )
        self.costs = CostModel(ema_alpha=float(config.policy.get("ema_alpha", 0.2)))
        self.access = AccessModel(
            prefetch_threshold=self.tau_p,
            top_k_prefetch=int(config.prefetch.get("top_k", 2)),
        )
        self.kpi = KPILog(on_record=lambda k: update_cost_model(self.costs, k))

        self.promote_min = int(config.caches.get("promote_min", 2))
        micro_cap = int(config.caches.get("micro_capacity", 32))
        shared_cap = int(config.caches.get("shared_capacity", 128))
        self.shared = SemanticCache(
            CacheScope("shared", config.caches.get("federation", "logistics")),
            shared_cap, self.tau_c, self.dim, half_life=self.policy.cache_ttl,
        )
        self.micro: dict[str, SemanticCache] = {
            agent_id: SemanticCache(
                CacheScope("micro", agent_id), micro_cap, self.tau_c, self.dim,
                half_life=self.policy.cache_ttl,
            )
            for agent_id in agent_mod.AGENT_IDS
        }

        self._build_fabric()
        self.bus = Bus(schedule=lambda fn: self.loop.schedule(0, fn))

        self.inflight: dict[str, _InflightProbe] = {}
        self.active_tasks: dict[str, np.ndarray] = {}
        self._shared_copy_of: dict[str, str] = {}
        self._last_region: str | None = None
        self._last_node_for: dict[str, PlanNode] = {}
        self._prefetch_pending: set[str] = set()
        self._pending_fetches: list[_PendingFetch] = []
        self._monitor_epoch = 0
        self._tuned_epoch = 0
        self._eid = 0
        self._iid = 0
        self._seq = 0

        self.probe_pass = 0
        self.probe_suppressed = 0
        self.early_serves = 0
        self.revisions = 0

        self._wire_agents()

    # -- setup ------------------------------------------------------------

    def _build_fabric(self) -> None:
        cfg = self.config
        self.fabric = EngineFabric(dim=self.dim, seed=self.seed)

        shipments = load_table_csv(cfg.fixtures["shipments_csv"], name="shipments")
        feedback = load_jsonl(cfg.fixtures["cust_feedback_jsonl"])
        events = load_jsonl(cfg.fixtures["live_stream_jsonl"])

        src_by_modality: dict[Modality, dict] = {}
        self.sources: list[SourceDescriptor] = []
        for raw in cfg.sources:
            modality = Modality(raw["modality"])
            src_by_modality[modality] = raw
            self.sources.append(
                SourceDescriptor(
                    source_id=raw["source_id"],
                    modality=modality,
                    summary_embedding=embed_text(raw.get("summary", ""), self.dim),
                    advertised_cost=float(raw.get("advertised_cost", 1.0)),
                )
            )
        missing = {m for m in Modality} - set(src_by_modality)
        if missing:
            raise ConfigError(
                f"scenario must declare one source per modality; missing "
                f"{sorted(m.value for m in missing)}"
            )
        self.relational_source_id = src_by_modality[Modality.RELATIONAL]["source_id"]
        self.vector_source_id = src_by_modality[Modality.VECTOR]["source_id"]
        self.stream_source_id = src_by_modality[Modality.STREAM]["source_id"]
        self.inference_source_id = src_by_modality[Modality.INFERENCE]["source_id"]

        relational = RelationalEngine(
            EngineDescriptor(
                engine_id="relational-engine",
                modality=Modality.RELATIONAL,
                supported_kinds=frozenset({"MetaProbe", "Scan", "Aggregate"}),
                op_latency={"MetaProbe": (2, 0.0), "Scan": (6, 0.05),
                            "Aggregate": (8, 0.05)},
                jitter_span=2,
            ),
            source_id=self.relational_source_id,
            tags=src_by_modality[Modality.RELATIONAL].get("tags", []),
        )
        relational.add_table(shipments)
        self.fabric.register(
            relational, [self.relational_source_id] + list(relational.tables)
        )

        vector = VectorEngine(
            EngineDescriptor(
                engine_id="vector-engine",
                modality=Modality.VECTOR,
                supported_kinds=frozenset({"MetaProbe", "VectorSearch"}),
                op_latency={"MetaProbe": (2, 0.0), "VectorSearch": (5, 0.002)},
                jitter_span=2,
            ),
            collection=self.vector_source_id,
            tags=src_by_modality[Modality.VECTOR].get("tags", []),
        )
        vector.add_records(
            [
                VectorRecord(
                    record_id=str(doc.get("customer_id", f"doc{i:03d}")),
                    embedding=embed_text(str(doc.get("text", "")), self.dim),
                    payload=doc,
                )
                for i, doc in enumerate(feedback)
            ]
        )
        self.fabric.register(vector, [self.vector_source_id])

        stream = StreamEngine(
            EngineDescriptor(
                engine_id="stream-engine",
                modality=Modality.STREAM,
                supported_kinds=frozenset({"MetaProbe", "Scan"}),
                op_latency={"MetaProbe": (2, 0.0), "Scan": (4, 0.05)},
                jitter_span=2,
            ),
            stream_id=self.stream_source_id,
            tags=src_by_modality[Modality.STREAM].get("tags", []),
        )
        stream.add_events(events)
        self.fabric.register(stream, [self.stream_source_id])

        inference = InferenceEngine(
            EngineDescriptor(
                engine_id="inference-engine",
                modality=Modality.INFERENCE,
                supported_kinds=frozenset({"MetaProbe", "Infer"}),
                op_latency={"MetaProbe": (2, 0.0)},
                jitter_span=0,
            ),
            service_id=self.inference_source_id,
            models=[
                ModelSpec(
                    model_id="sentiment-rules",
                    rules=(
                        Rule("stuck", "negative", 0.9),
                        Rule("delay", "negative", 0.85),
                        Rule("late", "negative", 0.85),
                        Rule("angry", "negative", 0.9),
                        Rule("slow", "negative", 0.8),
                        Rule("great", "positive", 0.9),
                        Rule("excellent", "positive", 0.9),
                        Rule("on time", "positive", 0.85),
                    ),
                    base_latency=220,
                    usd_per_call=0.01,
                    fallback_label="neutral",
                ),
                ModelSpec(
                    model_id="rootcause-rules",
                    rules=(
                        Rule("customs", "customs_issue", 0.9),
                        Rule("weather", "weather_issue", 0.8),
                        Rule("storm", "weather_issue", 0.8),
                        Rule("strike", "labor_issue", 0.8),
                    ),
                    base_latency=480,
                    usd_per_call=0.04,
                ),
            ],
            tags=src_by_modality[Modality.INFERENCE].get("tags", []),
        )
        self.fabric.register(inference, [self.inference_source_id])

    def _wire_agents(self) -> None:
        self.orchestrator = OrchestratorAgent(self)
        self.anomaly = AnomalyDetectionAgent(self)
        roster = [
            self.orchestrator,
            self.anomaly,
            SentimentAnalysisAgent(self),
            RootCauseAgent(self),
            ForecastingAgent(self),
            RoutingOptimizationAgent(self),
        ]
        self.agents = {a.spec.agent_id: a for a in roster}
        for agent in roster:
            for topic in agent.spec.subscriptions:
                self.bus.subscribe(topic, agent.spec.agent_id, agent.on_message)

    # -- small helpers -----------------------------------------------------

    @property
    def now(self) -> int:
        return self.loop.now

    def on(self, feature: str) -> bool:
        return feature in self.features

    def schedule(self, delay: int, fn: Callable[[], None]) -> None:
        self.loop.schedule(delay, fn)

    def next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def next_entry_id(self) -> str:
        self._eid += 1
        return f"e{self._eid:05d}"

    def new_intent(
        self,
        agent_id: str,
        text: str,
        modalities: set[Modality],
        params: dict | None = None,
    ) -> QueryIntent:
        self._iid += 1
        return make_intent(
            f"{agent_id}.i{self._iid:04d}", agent_id, text, modalities, params, self.dim
        )

    def publish(self, sender: str, topic: str, payload: dict) -> int:
        msg = make_message(topic, sender, payload, self.now, self.dim)
        return self.bus.publish(msg)

    def relational_catalog(self) -> dict[str, Any]:
        engine = self.fabric.engines["relational-engine"]
        return dict(engine.tables)

    def tune(self) -> None:
        """Retune policies, but only on freshly observed rates."""
        if not self.on("optimizer"):
            return
        if self._monitor_epoch == self._tuned_epoch:
            return
        self._tuned_epoch = self._monitor_epoch
        rate = self.shared.hit_rate() if self.on("shared_cache") else 0.0
        self.policy = tune_policies(note_shared_hit_rate(self.policy, rate))
        self.shared.half_life = self.policy.cache_ttl
        for cache in self.micro.values():
            cache.half_life = self.policy.cache_ttl

    def _note_probe(self, useful: bool) -> None:
        self.policy = note_probe_outcome(self.policy, useful)
        self._monitor_epoch += 1

    def _note_serve(self, revised: bool) -> None:
        self.policy = note_serve_outcome(self.policy, revised)
        self._monitor_epoch += 1

    # -- cache plumbing ----------------------------------------------------

    def _micro_cache(self, agent_id: str) -> SemanticCache | None:
        return self.micro.get(agent_id) if self.on("micro_cache") else None

    def _record_cache_hit(self, scope: str, op_kind: str) -> None:
        record_kpi(
            self.kpi,
            KPIRecord(
                component="cache", engine_id=scope, op_kind=op_kind,
                latency=0, rows_or_tokens=0, usd=0.0, cache_hit=True,
                timestamp=self.now,
            ),
        )

    def cache_fetch(
        self, agent_id: str, key: np.ndarray, op_kind: str,
        attention_weight: float = 0.0, modality: str | None = None,
    ) -> dict | None:
        """Micro-then-shared lookup; hits emit a zero-latency KPI record."""
        micro = self._micro_cache(agent_id)
        if micro is not None:
            found = micro.lookup(key, self.now, modality=modality)
            if found is not None:
                entry, _sim = found
                self._record_cache_hit(str(micro.scope), op_kind)
                if attention_weight >= self.router_config.high_weight_cutoff:
                    micro.bump_attention(entry.entry_id, attention_weight)
                self._maybe_promote(entry)
                return entry.payload
        if self.on("shared_cache"):
            found = self.shared.lookup(key, self.now, modality=modality)
            if found is not None:
                entry, _sim = found
                self._record_cache_hit(str(self.shared.scope), op_kind)
                if attention_weight >= self.router_config.high_weight_cutoff:
                    self.shared.bump_attention(entry.entry_id, attention_weight)
                return entry.payload
        return None

    def cache_store(
        self, agent_id: str, key: np.ndarray, payload: dict, modality: str,
        provenance: list[str],
    ) -> CacheEntry | None:
        micro = self._micro_cache(agent_id)
        if micro is None:
            return None
        entry = CacheEntry(
            entry_id=self.next_entry_id(),
            key_embedding=key,
            payload=payload,
            modality=modality,
            producer_agent=agent_id,
            created_at=self.now,
            last_hit_at=self.now,
            provenance=provenance,
        )
        micro.insert(entry, self.now)
        return entry

    def _copy_to_shared(self, entry: CacheEntry) -> None:
        if entry.entry_id in self._shared_copy_of:
            return
        shared_id = f"s{self.next_entry_id()}"
        self.shared.insert(
            CacheEntry(
                entry_id=shared_id,
                key_embedding=entry.key_embedding,
                payload=entry.payload,
                modality=entry.modality,
                producer_agent=entry.producer_agent,
                created_at=entry.created_at,
                last_hit_at=self.now,
                reuse_count=entry.reuse_count,
                attention_freq=entry.attention_freq,
                provenance=list(entry.provenance),
            ),
            self.now,
        )
        self._shared_copy_of[entry.entry_id] = shared_id

    def _maybe_promote(self, entry: CacheEntry) -> None:
        if not self.on("shared_cache"):
            return
        if entry.reuse_count >= self.promote_min:
            self._copy_to_shared(entry)

    def _register_task(self, agent_id: str, embedding: np.ndarray) -> None:
        self.active_tasks[agent_id] = embedding
        if not self.on("shared_cache"):
            return
        tasks = sorted(self.active_tasks.items())
        for a, b, _sim in detect_overlap(tasks, self.tau_o):
            if agent_id not in (a, b):
                continue
            self._merge_micro_into_shared(a)
            self._merge_micro_into_shared(b)

    def _merge_micro_into_shared(self, agent_id: str) -> None:
        micro = self._micro_cache(agent_id)
        if micro is None:
            return
        for eid in sorted(micro.entries):
            self._copy_to_shared(micro.entries[eid])

    # -- probes -------------------------------------------------------------

    def _probe_cache_payload(self, payload: dict) -> tuple[float, dict]:
        inner = payload.get("payload", payload)
        usefulness = 1.0 if inner.get("matched") else 0.0
        return usefulness, inner

    def _run_probe_unit(
        self, intent: QueryIntent, directive, on_outcome: Callable[[float, dict], None]
    ) -> None:
        decision = directive.decision
        if decision.verdict is Verdict.REDIRECT:
            self.probe_suppressed += 1
            entry = self.shared.touch(decision.entry_id, self.now)
            self._record_cache_hit(str(self.shared.scope), "MetaProbe")
            usefulness, inner = self._probe_cache_payload(entry.payload)
            self.schedule(0, lambda: on_outcome(usefulness, inner))
            return
        if decision.verdict is Verdict.DELAY:
            self.probe_suppressed += 1
            probe = self.inflight[decision.inflight_probe_id]
            probe.waiters.append(on_outcome)
            return

        self.probe_pass += 1
        probe_id = f"probe{self.next_seq():05d}"
        self.inflight[probe_id] = _InflightProbe(embedding=directive.probe_embedding)
        completion = self.now
        matched: set[str] = set()
        for node in directive.nodes:
            native = self.fabric.compile_node(node)
            partial, kpi = self.fabric.execute(
                native, probe_id, self.now, source_id=directive.source_id
            )
            record_kpi(self.kpi, kpi)
            completion = max(completion, partial.arrived_at)
            matched.update(partial.payload.get("matched", []))

        def finish() -> None:
            inner = {
                "op": "probe",
                "source": directive.source_id,
                "matched": sorted(matched),
            }
            usefulness = 1.0 if matched else 0.0
            wrapper = {
                "payload": inner,
                "result_embedding": embed_text(
                    f"probe {directive.source_id} "
                    + (" ".join(sorted(matched)) or "none"),
                    self.dim,
                ),
            }
            entry = self.cache_store(
                intent.agent_id, directive.probe_embedding, wrapper,
                "metadata", [directive.source_id],
            )
            probe = self.inflight.pop(probe_id)
            if probe.waiters and self.on("shared_cache"):
                if entry is not None:
                    self._copy_to_shared(entry)
                else:
                    shared_entry = CacheEntry(
                        entry_id=f"s{self.next_entry_id()}",
                        key_embedding=directive.probe_embedding,
                        payload=wrapper,
                        modality="metadata",
                        producer_agent=intent.agent_id,
                        created_at=self.now,
                        last_hit_at=self.now,
                        provenance=[directive.source_id],
                    )
                    self.shared.insert(shared_entry, self.now)
            on_outcome(usefulness, inner)
            for waiter in probe.waiters:
                self._record_cache_hit("inflight", "MetaProbe")
                waiter(usefulness, inner)

        self.loop.schedule_at(completion, finish)

    def execute_schema_probes(
        self, agent_id: str, goal: str, nodes: list[PlanNode],
        on_done: Callable[[dict], None],
    ) -> None:
        """Run an agent's exploratory probe sequence, caching the outcome."""
        key = embed_text(f"schema probes {goal}", self.dim)
        cached = self.cache_fetch(agent_id, key, "SchemaProbe", modality="metadata")
        if cached is not None:
            self.probe_suppressed += 1
            self.schedule(0, lambda: on_done(cached.get("payload", cached)))
            return
        if not nodes:
            self.schedule(0, lambda: on_done({}))
            return
        executable = [n for n in nodes if not isinstance(n, Aggregate)]
        completion = self.now
        matched: set[str] = set()
        for node in executable:
            native = self.fabric.compile_node(node)
            partial, kpi = self.fabric.execute(native, f"schema.{agent_id}", self.now)
            record_kpi(self.kpi, kpi)
            completion = max(completion, partial.arrived_at)
            if isinstance(node, MetaProbe):
                matched.update(partial.payload.get("matched", []))

        def finish() -> None:
            inner = {"op": "schema_probes", "goal": goal, "matched": sorted(matched)}
            wrapper = {
                "payload": inner,
                "result_embedding": embed_text(
                    f"schema probes {goal} " + " ".join(sorted(matched)), self.dim
                ),
            }
            self.cache_store(agent_id, key, wrapper, "metadata",
                             [self.relational_source_id])
            on_done(inner)

        self.loop.schedule_at(completion, finish)

    # -- intents ------------------------------------------------------------

    def _route(self, intent: QueryIntent, usefulness: dict[str, float]):
        return route(
            intent,
            self.sources,
            self.policy,
            self.costs,
            config=self.router_config,
            shared_cache=self.shared if self.on("shared_cache") else None,
            inflight=[(pid, p.embedding) for pid, p in sorted(self.inflight.items())],
            probe_usefulness=usefulness,
            engine_of=self.fabric.engine_map(),
            attention_enabled=self.on("attention"),
            suppression_enabled=self.on("shared_cache"),
        )

    def execute_intent(
        self, intent: QueryIntent, on_answer: Callable[[dict], None]
    ) -> None:
        """Probe, then retrieve, then serve through the quorum layer."""
        self._register_task(intent.agent_id, intent.embedding)
        plan = self._route(intent, {})
        if not plan.probes:
            self._retrieve(intent, {}, on_answer)
            return
        usefulness: dict[str, float] = {}
        pending = len(plan.probes)

        def outcome_for(source_id: str) -> Callable[[float, dict], None]:
            def cb(useful: float, _payload: dict) -> None:
                nonlocal pending
                usefulness[source_id] = useful
                self._note_probe(useful >= 0.5)
                pending -= 1
                if pending == 0:
                    feedback = sorted(usefulness.items())
                    update_attention(plan.attention, feedback)  # sharpened focus
                    self._retrieve(intent, usefulness, on_answer)

            return cb

        for directive in plan.probes:
            self._run_probe_unit(intent, directive, outcome_for(directive.source_id))

    def _retrieve(
        self,
        intent: QueryIntent,
        usefulness: dict[str, float],
        on_answer: Callable[[dict], None],
    ) -> None:
        plan = self._route(intent, usefulness)
        validate_plan(plan.plan)
        if not plan.retrieval:
            raise RoutingError(
                f"no viable sources for intent {intent.intent_id}; reformulate"
            )
        ctx = _IntentContext(
            intent=intent,
            on_answer=on_answer,
            expectation=plan.expectation,
            state=QuorumState(
                expectation=plan.expectation,
                weights=self.conf_weights,
                agreement_prior=self.agreement_prior,
                revision_bound=self.revision_bound,
            ),
            weights_of=plan.attention.as_dict(),
        )
        targets = plan.retrieval_sources
        if self.on("prefetch"):
            for region in targets:
                if self._last_region is not None:
                    observe_access(self.access, self._last_region, region)
                self._last_region = region
        for source_id, node in plan.retrieval:
            self._last_node_for[source_id] = node
            self._fetch(ctx, source_id, node)
        if self.on("prefetch") and targets:
            self._prefetch_from(intent.agent_id, targets[-1])

    def _pending_match(self, key: np.ndarray, kind: str) -> _PendingFetch | None:
        best = None
        best_sim = self.router_config.tau_s
        for pf in self._pending_fetches:
            if pf.kind != kind:
                continue
            sim = float(np.dot(pf.key, key))
            if sim > best_sim or (best is None and sim >= best_sim):
                best, best_sim = pf, sim
        return best

    def _fetch(self, ctx: _IntentContext, source_id: str, node: PlanNode) -> None:
        key = self._node_cache_key(node)
        weight = ctx.weights_of.get(source_id, 0.0)
        cached = self.cache_fetch(
            ctx.intent.agent_id, key, node.kind, weight, modality=node.kind.lower()
        )
        if cached is not None:
            partial = PartialResult(
                query_id=ctx.intent.intent_id,
                source_id=source_id,
                modality=self._modality_of(source_id),
                payload=cached["payload"],
                result_embedding=cached["result_embedding"],
                arrived_at=self.now,
            )
            self.schedule(0, lambda: self._deliver(ctx, partial))
            return
        if self.on("shared_cache"):
            # an equivalent fetch already in flight: wait for it instead
            pending = self._pending_match(key, node.kind)
            if pending is not None:
                self._record_cache_hit("inflight", node.kind)
                pending.waiters.append((ctx, source_id))
                return
        native = self.fabric.compile_node(node)
        partial, kpi = self.fabric.execute(
            native, ctx.intent.intent_id, self.now, source_id=source_id
        )
        record_kpi(self.kpi, kpi)
        pf = _PendingFetch(key=key, kind=node.kind, partial=partial)
        self._pending_fetches.append(pf)

        def land() -> None:
            self._pending_fetches.remove(pf)
            wrapper = {
                "payload": partial.payload,
                "result_embedding": partial.result_embedding,
            }
            entry = self.cache_store(
                ctx.intent.agent_id, key, wrapper, node.kind.lower(), [source_id]
            )
            if entry is not None and ctx.weights_of.get(source_id, 0.0) >= \
                    self.router_config.high_weight_cutoff:
                cache = self._micro_cache(ctx.intent.agent_id)
                if cache is not None:
                    cache.bump_attention(entry.entry_id,
                                         ctx.weights_of[source_id])
            self._deliver(ctx, partial)
            for w_ctx, w_source in pf.waiters:
                self._deliver(
                    w_ctx,
                    PartialResult(
                        query_id=w_ctx.intent.intent_id,
                        source_id=w_source,
                        modality=partial.modality,
                        payload=partial.payload,
                        result_embedding=partial.result_embedding,
                        arrived_at=partial.arrived_at,
                    ),
                )

        self.loop.schedule_at(partial.arrived_at, land)

    def _modality_of(self, source_id: str) -> Modality:
        engine = self.fabric.engine_for_source(source_id)
        return engine.descriptor.modality

    def _deliver(self, ctx: _IntentContext, partial: PartialResult) -> None:
        state, exp = ctx.state, ctx.expectation
        if state.served:
            accept_partial(state, exp, partial)
            event = revise(state, partial)
            if event is not None:
                self.revisions += 1
                ctx.revised = True
                self._note_serve(True)
            self._maybe_finalize(ctx)
            return
        accept_partial(state, exp, partial)
        answer = None
        complete = set(state.received) == set(exp.expected_sources)
        if self.on("quorum"):
            answer = maybe_serve(state, exp, self.now)
            if answer is None and complete:
                answer = serve_full(state, exp, self.now)
        elif complete:
            answer = serve_full(state, exp, self.now)
        if answer is not None:
            if len(state.received) < len(exp.expected_sources):
                self.early_serves += 1
            self.schedule(0, lambda: ctx.on_answer(answer))
            self._maybe_finalize(ctx)

    def _maybe_finalize(self, ctx: _IntentContext) -> None:
        if ctx.finalized or not ctx.state.served:
            return
        if set(ctx.state.received) != set(ctx.expectation.expected_sources):
            return
        ctx.finalized = True
        if not ctx.revised:
            self._note_serve(False)

    # -- node-level cache keys ----------------------------------------------

    def _node_cache_key(self, node: PlanNode) -> np.ndarray:
        if isinstance(node, VectorSearch):
            salt = embed_text(f"vector {node.source} k={node.k}", self.dim)
            mixed = 2.0 * node.query_embedding + salt
            norm = np.sqrt(np.dot(mixed, mixed))
            return mixed / norm if norm > 0 else salt
        if isinstance(node, Aggregate):
            text = (
                f"aggregate {node.agg} {node.field} group {node.group_key} "
                f"scan {node.child.source} predicate {node.child.predicate}"
            )
        elif isinstance(node, Scan):
            text = f"scan {node.source} predicate {node.predicate} limit {node.limit}"
        elif isinstance(node, Infer):
            text = f"infer {node.source} {node.model_id} {node.input_ref}"
        elif isinstance(node, MetaProbe):
            text = f"meta {node.source} {node.name_pattern}"
        else:
            text = f"{node.kind} {node.node_id}"
        return embed_text(text, self.dim)

    # -- prefetcher ----------------------------------------------------------

    def _prefetch_from(self, agent_id: str, region: str) -> None:
        for next_region, _prob in predict_prefetch(self.access, region):
            node = self._last_node_for.get(next_region)
            if node is None or next_region in self._prefetch_pending:
                continue
            key = self._node_cache_key(node)
            modality = node.kind.lower()
            micro = self._micro_cache(agent_id)
            if micro is not None and micro.peek(key, modality=modality) is not None:
                continue
            if self.on("shared_cache") and (
                self.shared.peek(key, modality=modality) is not None
                or self._pending_match(key, node.kind) is not None
            ):
                continue
            if micro is None and not self.on("shared_cache"):
                continue
            self._prefetch_pending.add(next_region)
            native = self.fabric.compile_node(node)
            partial, kpi = self.fabric.execute(
                native, f"prefetch.{self.next_seq()}", self.now, source_id=next_region
            )
            record_kpi(self.kpi, kpi)

            def land(p=partial, k=key, nr=next_region, nd=node) -> None:
                wrapper = {
                    "payload": p.payload,
                    "result_embedding": p.result_embedding,
                }
                self._prefetch_pending.discard(nr)
                self.cache_store(agent_id, k, wrapper, nd.kind.lower(),
                                 ["prefetch", nr])

            self.loop.schedule_at(partial.arrived_at, land)

    # -- inference helpers ----------------------------------------------------

    def classify_docs(
        self,
        agent_id: str,
        docs: list[dict],
        model_id: str,
        on_done: Callable[[dict[str, str]], None],
    ) -> None:
        """Label docs, reusing cached embeddings/labels before calling the model."""
        labels: dict[str, str] = {}
        pending = len(docs)
        if pending == 0:
            self.schedule(0, lambda: on_done({}))
            return

        def one_done() -> None:
            nonlocal pending
            pending -= 1
            if pending == 0:
                on_done(dict(sorted(labels.items())))

        for doc in docs:
            doc_key = embed_text(doc["text"], self.dim)
            cached = self.cache_fetch(agent_id, doc_key, "Infer", modality="inference")
            if cached is not None and "label" in cached.get("payload", {}):
                labels[doc["record_id"]] = cached["payload"]["label"]
                self.schedule(0, one_done)
                continue
            node = Infer(
                node_id=f"infer.{self.next_seq()}",
                source=self.inference_source_id,
                model_id=model_id,
                input_ref=doc["text"],
            )
            native = self.fabric.compile_node(node)
            partial, kpi = self.fabric.execute(native, f"classify.{agent_id}", self.now)
            record_kpi(self.kpi, kpi)

            def land(p=partial, d=doc, k=doc_key) -> None:
                label = p.payload["label"]
                labels[d["record_id"]] = label
                wrapper = {
                    "payload": {
                        "record_id": d["record_id"],
                        "text": d["text"],
                        "label": label,
                    },
                    "result_embedding": p.result_embedding,
                }
                self.cache_store(
                    agent_id, k, wrapper, "inference",
                    [self.vector_source_id, self.inference_source_id],
                )
                one_done()

            self.loop.schedule_at(partial.arrived_at, land)

    # -- scenario driver -------------------------------------------------------

    def start(self) -> None:
        agents_cfg = self.config.agents
        waves = int(agents_cfg.get("waves", 3))
        interval = int(agents_cfg.get("wave_interval", 600))
        tune_interval = int(agents_cfg.get("tune_interval", 50))
        for w in range(waves):
            self.loop.schedule_at(w * interval, lambda w=w: self.anomaly.start_wave(w))
        horizon = waves * interval + int(agents_cfg.get("drain_ticks", 1500))
        for t in range(tune_interval, horizon, tune_interval):
            self.loop.schedule_at(t, self.orchestrator.on_tune_tick)

    def build_report(self) -> ScenarioReport:
        micro_hits = sum(c.hits for c in self.micro.values())
        micro_misses = sum(c.misses for c in self.micro.values())
        micro_rate = micro_hits / (micro_hits + micro_misses) if micro_hits + micro_misses else 0.0
        probe_count = sum(
            1 for r in self.kpi.records
            if r.component == "engine" and r.op_kind == "MetaProbe"
        )
        return ScenarioReport(
            backend_query_count=backend_executions(self.kpi),
            probe_count=probe_count,
            suppressed_probe_count=self.probe_suppressed,
            micro_cache_hit_rate=round(micro_rate, 6),
            shared_cache_hit_rate=round(self.shared.hit_rate(), 6),
            total_simulated_latency=total_latency(self.kpi),
            total_usd=round(total_usd(self.kpi), 6),
            quorum_early_serve_count=self.early_serves,
            revision_count=self.revisions,
            final_routing_decision=self.orchestrator.final_decision or {},
        )


def run_scenario(config: ScenarioConfig, seed: int | None = None) -> ScenarioReport:
    """Execute the scripted workflow to completion on the logical clock."""
    runtime = FabricRuntime(config, seed)
    runtime.start()
    runtime.loop.run()
    return runtime.build_report()


def bundled_scenario_path(name: str = "logistics.json") -> Path:
    """Path of a scenario shipped with the package."""
    return Path(__file__).parent / "data" / name
