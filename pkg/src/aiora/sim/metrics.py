"""Pure aggregation of a simulation trace into summary metrics."""

from __future__ import annotations

import json
from collections import Counter
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from aiora.errors import MalformedTrace

_KINDS = {
    "telemetry", "snapshot", "event", "lifecycle", "proposal", "conflicts", "decision",
    "actuation", "error", "negotiation", "kpi", "inventory",
}


@dataclass(frozen=True)
class AppMetrics:
    samples: int
    latency_p50: float | None
    latency_p95: float | None
    latency_p99: float | None
    latency_max: float | None
    downtime_ticks: int

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass(frozen=True)
class MetricsSummary:
    ticks: int
    energy_wh: float
    carbon_g: float
    apps: Mapping[str, AppMetrics] = field(default_factory=dict)
    actuations: int = 0
    actuations_ok: int = 0
    actuations_by_kind: Mapping[str, int] = field(default_factory=dict)
    accepted: int = 0
    deferred: int = 0
    rounds: int = 0
    conflicts: int = 0
    negotiations: int = 0
    errors: int = 0

    def to_dict(self) -> dict[str, Any]:
        d = dict(self.__dict__)
        d["apps"] = {k: v.to_dict() for k, v in sorted(self.apps.items())}
        d["actuations_by_kind"] = dict(sorted(self.actuations_by_kind.items()))
        return d


def _as_dict(rec: Any) -> Mapping[str, Any]:
    return rec.to_dict() if hasattr(rec, "to_dict") else rec


def _percentile(values: list[float], q: float) -> float | None:
    return float(np.percentile(np.asarray(values), q)) if values else None


def summarize(trace: Iterable[Any], tick_seconds: float = 1.0) -> MetricsSummary:
    """Aggregate a trace; energy integrates snapshot power over ``tick_seconds`` per tick."""
    if not tick_seconds > 0:
        raise ValueError("tick_seconds must be positive")
    last_seq = -1
    joules = 0.0
    carbon_g = 0.0
    ticks: set[int] = set()
    latencies: dict[str, list[float]] = {}
    downtime: Counter[str] = Counter()
    seen_apps: set[str] = set()
    by_kind: Counter[str] = Counter()
    actuations = ok = accepted = deferred = rounds = conflicts = negotiations = errors = 0
    for raw in trace:
        rec = _as_dict(raw)
        try:
            seq, tick, kind, payload = rec["seq"], rec["tick"], rec["kind"], rec["payload"]
        except (KeyError, TypeError) as exc:
            raise MalformedTrace(f"record missing field: {exc}") from exc
        if not isinstance(seq, int) or seq <= last_seq:
            raise MalformedTrace(f"sequence number {seq} after {last_seq}")
        if kind not in _KINDS or not isinstance(payload, Mapping):
            raise MalformedTrace(f"record {seq}: bad kind or payload")
        last_seq = seq
        try:
            if kind == "snapshot":
                ticks.add(tick)
                joules += sum(payload["power_w"].values()) * tick_seconds
                carbon_g += sum(payload["carbon_g_per_h"].values()) * tick_seconds / 3600.0
            elif kind == "kpi":
                for app_id, k in payload["apps"].items():
                    seen_apps.add(app_id)
                    if k["latency_ms"] is not None:
                        latencies.setdefault(app_id, []).append(float(k["latency_ms"]))
                    if min(k["ready"].values(), default=0) == 0:
                        downtime[app_id] += 1
            elif kind == "actuation":
                actuations += 1
                ok += bool(payload["ok"])
                by_kind[payload["action"]["kind"]] += 1
            elif kind == "decision":
                rounds += 1
                accepted += len(payload["accepted"])
                deferred += len(payload["deferred"])
            elif kind == "conflicts":
                conflicts += len(payload["conflicts"])
            elif kind == "negotiation":
                negotiations += "accepted" in payload
            elif kind == "error":
                errors += 1
        except (KeyError, TypeError, AttributeError) as exc:
            raise MalformedTrace(f"record {seq} ({kind}): {exc}") from exc

    apps = {}
    for app_id in sorted(seen_apps):
        vals = latencies.get(app_id, [])
        apps[app_id] = AppMetrics(
            samples=len(vals),
            latency_p50=_percentile(vals, 50),
            latency_p95=_percentile(vals, 95),
            latency_p99=_percentile(vals, 99),
            latency_max=max(vals) if vals else None,
            downtime_ticks=downtime[app_id],
        )
    return MetricsSummary(
        ticks=len(ticks),
        energy_wh=joules / 3600.0,
        carbon_g=carbon_g,
        apps=apps,
        actuations=actuations,
        actuations_ok=ok,
        actuations_by_kind=dict(by_kind),
        accepted=accepted,
        deferred=deferred,
        rounds=rounds,
        conflicts=conflicts,
        negotiations=negotiations,
        errors=errors,
    )


def read_trace(path: str | Path) -> list[dict[str, Any]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise MalformedTrace(f"line {n}: {exc}") from exc
    return out


def write_metrics(summary: MetricsSummary, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
