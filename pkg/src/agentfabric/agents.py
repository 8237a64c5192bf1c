"""Scripted logistics agents and their schema-probing behavior.

Six rule-driven agents reproduce the delivery-disruption workflow: anomaly
detection finds a high-variance region from shipment aggregates, sentiment
analysis labels customer feedback, root-cause analysis fuses stream events
with the cached feedback evidence, forecasting projects the delay, and
routing optimization publishes the replanned route. The orchestrator
watches KPI rates and periodically retunes fabric policies.

Agents are deliberately scripted, not clever: the point is to exercise the
fabric's probing, caching, quorum, and feedback machinery under a
deterministic workload.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from statistics import pvariance
from typing import TYPE_CHECKING

from agentfabric.attention import Modality
from agentfabric.bus import BusMessage
from agentfabric.embedding import tokenize
from agentfabric.engines import Table
from agentfabric.errors import FabricError
from agentfabric.ir import Aggregate, MetaProbe, PlanBuilder, PlanNode, Scan, like_match

if TYPE_CHECKING:  # pragma: no cover
    from agentfabric.scenario import FabricRuntime

AGENT_IDS = (
    "orchestrator",
    "anomaly_detection",
    "sentiment_analysis",
    "root_cause",
    "forecasting",
    "routing_optimization",
)

TOPIC_ANOMALIES = "anomalies"
TOPIC_SENTIMENT = "sentiment_summary"
TOPIC_ROOT_CAUSES = "root_causes"
TOPIC_FORECASTS = "forecasts"
TOPIC_ROUTE_PLANS = "route_plans"


@dataclass(frozen=True)
class AgentSpec:
    agent_id: str
    subscriptions: tuple[str, ...] = ()
    partial_knowledge: bool = False
    # ordered trigger -> action rules, for introspection/debugging
    rules: tuple[tuple[str, str], ...] = ()


# ---------------------------------------------------------------------------
# speculative schema probing
# ---------------------------------------------------------------------------

def _sample_mean(table: Table, column: str) -> float:
    sample = table.sample(5)
    if not sample:
        return 0.0
    return sum(float(r[column]) for r in sample) / len(sample)


def _group_key_for(table: Table) -> str | None:
    """First string column whose sample repeats a value; else first string column."""
    sample = table.sample(5)
    str_cols = [c for c in table.columns if table.col_types[c] == "str"]
    for c in str_cols:
        values = [r[c] for r in sample]
        if len(values) != len(set(values)):
            return c
    return str_cols[0] if str_cols else None


def speculative_probe_sequence(
    agent: AgentSpec,
    goal_text: str,
    catalog: dict[str, Table],
    source_id: str,
    builder: PlanBuilder | None = None,
) -> list[PlanNode]:
    """Exploratory micro-query plan for an agent with partial schema knowledge.

    Stage 1 probes metadata with one %token% pattern per goal token.
    Stage 2 samples the first five rows of each table whose name or columns
    matched. Stage 3 hypothesizes a delay aggregate from a pair of
    timestamp-typed columns (later minus earlier, ordered by sample means),
    grouped by the first repeating string column.
    """
    if not agent.partial_knowledge:
        raise FabricError(f"{agent.agent_id} has full schema knowledge; no probing")
    builder = builder or PlanBuilder(f"{agent.agent_id}.probe")
    nodes: list[PlanNode] = []
    patterns: list[str] = []
    seen = set()
    for tok in tokenize(goal_text):
        if tok in seen:
            continue
        seen.add(tok)
        patterns.append(f"%{tok}%")
        nodes.append(
            MetaProbe(node_id=builder.next_id(), source=source_id,
                      name_pattern=f"%{tok}%")
        )

    matched = []
    for name in sorted(catalog):
        table = catalog[name]
        names = [table.name] + table.columns
        if any(like_match(p, n) for p in patterns for n in names):
            matched.append(table)
    if not matched:
        return nodes

    for table in matched:
        nodes.append(Scan(node_id=builder.next_id(), source=table.name, limit=5))

    for table in matched:
        ts_cols = table.timestamp_columns()
        if len(ts_cols) < 2:
            continue
        a, b = ts_cols[0], ts_cols[1]
        mean_a, mean_b = _sample_mean(table, a), _sample_mean(table, b)
        if mean_a == mean_b:
            later, earlier = max(a, b), min(a, b)
        elif mean_a > mean_b:
            later, earlier = a, b
        else:
            later, earlier = b, a
        group_key = _group_key_for(table)
        if group_key is None:
            continue
        nodes.append(
            Aggregate(
                node_id=builder.next_id(),
                child=Scan(node_id=builder.next_id(), source=table.name),
                group_key=group_key,
                agg="avg",
                field=f"{later}-{earlier}",
            )
        )
    return nodes


# ---------------------------------------------------------------------------
# scripted agents
# ---------------------------------------------------------------------------

class BaseAgent:
    spec: AgentSpec

    def __init__(self, runtime: "FabricRuntime"):
        self.rt = runtime

    def on_message(self, msg: BusMessage) -> None:  # pragma: no cover - overridden
        raise NotImplementedError


def _slug(text: str) -> str:
    return "_".join(tokenize(text))


class AnomalyDetectionAgent(BaseAgent):
    spec = AgentSpec(
        agent_id="anomaly_detection",
        partial_knowledge=True,
        rules=(
            ("wave tick", "probe schema, aggregate delays, scan live events"),
            ("delay variance over threshold", "publish anomaly summary"),
        ),
    )

    def start_wave(self, wave: int) -> None:
        agents_cfg = self.rt.config.agents
        goal = agents_cfg["goal"]
        catalog = self.rt.relational_catalog()
        seq = speculative_probe_sequence(
            self.spec, goal, catalog, self.rt.relational_source_id,
            PlanBuilder(f"{self.spec.agent_id}.w{wave}.probe"),
        )
        hypothesis = next(
            (n for n in reversed(seq) if isinstance(n, Aggregate)), None
        )

        def after_probes(_payload: dict) -> None:
            self._query_delays(wave, goal, hypothesis)

        self.rt.execute_schema_probes(self.spec.agent_id, goal, seq, after_probes)

    def _query_delays(self, wave: int, goal: str, hypothesis: Aggregate | None) -> None:
        if hypothesis is None:
            return
        intent = self.rt.new_intent(
            self.spec.agent_id,
            goal,
            {Modality.RELATIONAL, Modality.STREAM},
            params={"plan_overrides": {self.rt.relational_source_id: hypothesis}},
        )
        self.rt.execute_intent(intent, self._on_answer)

    def _on_answer(self, answer: dict) -> None:
        groups: dict[str, float] = {}
        events: list[dict] = []
        for part in answer["results"]:
            payload = part["payload"]
            if payload.get("op") == "aggregate":
                groups = payload["groups"]
            elif payload.get("op") == "stream_replay":
                events = payload["events"]
        if len(groups) < 2:
            return
        cfg = self.rt.config.agents
        var = pvariance(groups.values())
        if var < cfg["anomaly_variance_threshold"]:
            return
        region = max(groups, key=lambda r: (groups[r], r))
        region_events = [e for e in events if e.get("region") == region]
        kinds = Counter(str(e.get("event_type", "")) for e in region_events)
        top_kind = min(kinds, key=lambda k: (-kinds[k], k)) if kinds else ""
        keywords = tokenize(top_kind) or ["delay"]
        score = round(var / (var + cfg["anomaly_score_scale"]), 4)
        self.rt.publish(
            self.spec.agent_id,
            TOPIC_ANOMALIES,
            {
                "region": region,
                "anomaly_score": score,
                "correlated_keywords": keywords,
            },
        )


class SentimentAnalysisAgent(BaseAgent):
    spec = AgentSpec(
        agent_id="sentiment_analysis",
        subscriptions=(TOPIC_ANOMALIES,),
        rules=(
            ("anomaly message", "retrieve feedback docs, label them, publish counts"),
        ),
    )

    def on_message(self, msg: BusMessage) -> None:
        region = msg.payload["region"]
        keywords = " ".join(msg.payload["correlated_keywords"])
        intent = self.rt.new_intent(
            self.spec.agent_id,
            f"customer feedback sentiment {keywords} {region}",
            {Modality.VECTOR},
            params={"vector_k": self.rt.config.agents["top_docs"]},
        )
        self.rt.execute_intent(
            intent, lambda answer: self._on_answer(region, answer)
        )

    def _on_answer(self, region: str, answer: dict) -> None:
        docs = _docs_from_answer(answer)
        if not docs:
            return

        def done(labels: dict[str, str]) -> None:
            counts = Counter(labels.values())
            self.rt.publish(
                self.spec.agent_id,
                TOPIC_SENTIMENT,
                {
                    "region": region,
                    "sentiment_counts": {k: counts[k] for k in sorted(counts)},
                    "doc_ids": sorted(d["record_id"] for d in docs),
                },
            )

        self.rt.classify_docs(self.spec.agent_id, docs, "sentiment-rules", done)


class RootCauseAgent(BaseAgent):
    spec = AgentSpec(
        agent_id="root_cause",
        subscriptions=(TOPIC_ANOMALIES, TOPIC_SENTIMENT),
        rules=(
            ("anomaly + sentiment summary", "fuse stream/feedback/inference evidence"),
            ("evidence served", "publish root cause"),
        ),
    )

    def __init__(self, runtime: "FabricRuntime"):
        super().__init__(runtime)
        self._anomaly: dict[str, dict] = {}
        self._sentiment: dict[str, dict] = {}
        self._done_regions: set[str] = set()

    def on_message(self, msg: BusMessage) -> None:
        region = msg.payload["region"]
        if msg.topic == TOPIC_ANOMALIES:
            self._anomaly[region] = msg.payload
        else:
            self._sentiment[region] = msg.payload
        if region in self._anomaly and region in self._sentiment:
            anomaly = self._anomaly.pop(region)
            self._sentiment.pop(region)
            self._investigate(region, anomaly)

    def _investigate(self, region: str, anomaly: dict) -> None:
        keywords = " ".join(anomaly["correlated_keywords"])
        intent = self.rt.new_intent(
            self.spec.agent_id,
            f"root cause analysis delivery delays {keywords} {region} events feedback evidence",
            {Modality.STREAM, Modality.VECTOR, Modality.INFERENCE},
            params={
                "stream_predicate": f"region='{region}'",
                "vector_k": self.rt.config.agents["top_docs"],
                "model_id": "rootcause-rules",
                "input_text": f"root cause {keywords} {region} evidence",
            },
        )
        self.rt.execute_intent(intent, lambda answer: self._on_answer(region, answer))

    def _on_answer(self, region: str, answer: dict) -> None:
        events: list[dict] = []
        docs: list[dict] = []
        for part in answer["results"]:
            payload = part["payload"]
            if payload.get("op") == "stream_replay":
                events = payload["events"]
            elif payload.get("op") == "vector_search":
                docs = _docs_from_answer({"results": [part]})
        kinds = Counter(str(e.get("event_type", "")) for e in events)
        top_kind = min(kinds, key=lambda k: (-kinds[k], k)) if kinds else "unknown"
        cause = _slug(top_kind) or "unknown"

        def done(labels: dict[str, str]) -> None:
            negative = sum(1 for v in labels.values() if v == "negative")
            self.rt.publish(
                self.spec.agent_id,
                TOPIC_ROOT_CAUSES,
                {"region": region, "cause": cause, "negative_docs": negative},
            )

        if docs:
            self.rt.classify_docs(self.spec.agent_id, docs, "sentiment-rules", done)
        else:
            done({})


class ForecastingAgent(BaseAgent):
    spec = AgentSpec(
        agent_id="forecasting",
        subscriptions=(TOPIC_ANOMALIES,),
        rules=(
            ("anomaly message", "reuse the historical delay aggregate, project trend"),
        ),
    )

    def on_message(self, msg: BusMessage) -> None:
        region = msg.payload["region"]
        agg_cfg = self.rt.config.agents["aggregate"]
        builder = PlanBuilder(f"{self.spec.agent_id}.{self.rt.next_seq()}")
        node = Aggregate(
            node_id=builder.next_id(),
            child=Scan(node_id=builder.next_id(), source=agg_cfg["table"]),
            group_key=agg_cfg["group_key"],
            agg="avg",
            field=agg_cfg["field"],
        )
        intent = self.rt.new_intent(
            self.spec.agent_id,
            f"forecast delivery delay trend {region} historical shipments",
            {Modality.RELATIONAL},
            params={"plan_overrides": {self.rt.relational_source_id: node}},
        )
        self.rt.execute_intent(intent, lambda answer: self._on_answer(region, answer))

    def _on_answer(self, region: str, answer: dict) -> None:
        groups = {}
        for part in answer["results"]:
            if part["payload"].get("op") == "aggregate":
                groups = part["payload"]["groups"]
        if region not in groups:
            return
        factor = self.rt.config.agents["growth_factor"]
        predicted = round(groups[region] * factor, 1)
        self.rt.publish(
            self.spec.agent_id,
            TOPIC_FORECASTS,
            {"region": region, "predicted_delay_min": predicted},
        )


class RoutingOptimizationAgent(BaseAgent):
    spec = AgentSpec(
        agent_id="routing_optimization",
        subscriptions=(TOPIC_ROOT_CAUSES, TOPIC_FORECASTS),
        rules=(
            ("root cause + forecast for a region", "publish replanned route"),
        ),
    )

    def __init__(self, runtime: "FabricRuntime"):
        super().__init__(runtime)
        self._causes: dict[str, dict] = {}
        self._forecasts: dict[str, dict] = {}

    def on_message(self, msg: BusMessage) -> None:
        region = msg.payload["region"]
        if msg.topic == TOPIC_ROOT_CAUSES:
            self._causes[region] = msg.payload
        else:
            self._forecasts[region] = msg.payload
        if region in self._causes and region in self._forecasts:
            cause = self._causes.pop(region)
            forecast = self._forecasts.pop(region)
            route_table = self.rt.config.agents.get("route_table", {})
            new_route = route_table.get(region, f"{region} direct")
            self.rt.publish(
                self.spec.agent_id,
                TOPIC_ROUTE_PLANS,
                {
                    "region": region,
                    "new_route": new_route,
                    "cause": cause["cause"],
                    "predicted_delay_min": forecast["predicted_delay_min"],
                },
            )


class OrchestratorAgent(BaseAgent):
    spec = AgentSpec(
        agent_id="orchestrator",
        subscriptions=(TOPIC_ROUTE_PLANS,),
        rules=(
            ("every tune interval", "retune probe budget, quorum threshold, cache ttl"),
            ("route plan message", "record the current routing decision"),
        ),
    )

    def __init__(self, runtime: "FabricRuntime"):
        super().__init__(runtime)
        self.final_decision: dict | None = None

    def on_message(self, msg: BusMessage) -> None:
        self.final_decision = dict(msg.payload)

    def on_tune_tick(self) -> None:
        self.rt.tune()


def _docs_from_answer(answer: dict) -> list[dict]:
    docs = []
    for part in answer["results"]:
        payload = part["payload"]
        if payload.get("op") == "vector_search":
            for hit in payload["hits"]:
                docs.append(
                    {
                        "record_id": hit["record_id"],
                        "text": str(hit["payload"].get("text", "")),
                    }
                )
    docs.sort(key=lambda d: d["record_id"])
    return docs
