"""Runtime KPI collection feeding the optimizer's cost models."""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Callable

CSV_HEADER = "component,engine_id,op_kind,latency,rows_or_tokens,usd,cache_hit,timestamp"


@dataclass(frozen=True)
class KPIRecord:
    component: str
    engine_id: str
    op_kind: str
    latency: int
    rows_or_tokens: int
    usd: float
    cache_hit: bool
    timestamp: int


class KPILog:
    """Append-only KPI sink; every record is forwarded to ``on_record``."""

    def __init__(self, on_record: Callable[[KPIRecord], None] | None = None):
        self.records: list[KPIRecord] = []
        self.on_record = on_record

    def __len__(self) -> int:
        return len(self.records)


def record_kpi(sink: KPILog, kpi: KPIRecord) -> None:
    sink.records.append(kpi)
    if sink.on_record is not None:
        sink.on_record(kpi)


def backend_executions(sink: KPILog) -> int:
    """Engine executions that actually reached a backend (cache hits excluded)."""
    return sum(1 for r in sink.records if r.component == "engine" and not r.cache_hit)


def total_latency(sink: KPILog) -> int:
    return sum(r.latency for r in sink.records)


def total_usd(sink: KPILog) -> float:
    return sum(r.usd for r in sink.records)


def to_csv(sink: KPILog) -> str:
    """KPI log as CSV, columns in the declared record order."""
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for r in sink.records:
        buf.write(
            f"{r.component},{r.engine_id},{r.op_kind},{r.latency},"
            f"{r.rows_or_tokens},{r.usd:g},{str(r.cache_hit).lower()},{r.timestamp}\n"
        )
    return buf.getvalue()
