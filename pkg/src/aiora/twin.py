"""Network digital twin: telemetry mirror, immutable snapshots, what-if projection."""

from __future__ import annotations

import bisect
import json
import threading
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, replace
from enum import Enum
from types import MappingProxyType
from typing import TYPE_CHECKING, Any

from aiora.errors import MissingMetric, OutOfOrderTelemetry, UnknownEntity
from aiora.model import (
    ZERO,
    ResourceVector,
    Topology,
    carbon_rate,
    power_draw,
    user_latency,
)

if TYPE_CHECKING:
    from aiora.loops import ActuationProposal


class Provenance(str, Enum):
    LOCAL = "Local"
    EXTERNAL_TWIN = "ExternalTwin"


class SegmentStatus(str, Enum):
    ONLINE = "online"
    MAINTENANCE = "maintenance"
    FAILED = "failed"


@dataclass(frozen=True)
class TelemetryRecord:
    tick: int
    source: str
    metric: str
    value: float
    unit: str = ""
    provenance: Provenance = Provenance.LOCAL

    def to_dict(self) -> dict[str, Any]:
        return {
            "tick": self.tick,
            "source": self.source,
            "metric": self.metric,
            "value": self.value,
            "unit": self.unit,
            "provenance": self.provenance.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> TelemetryRecord:
        return cls(
            int(d["tick"]),
            str(d["source"]),
            str(d["metric"]),
            float(d["value"]),
            str(d.get("unit", "")),
            Provenance(d.get("provenance", "Local")),
        )


def parse_telemetry_lines(text: str, provenance: Provenance | None = None) -> list[TelemetryRecord]:
    """Parse a JSON-lines telemetry batch; ``provenance`` overrides each record's tag."""
    out = []
    for line in text.splitlines():
        if line.strip():
            rec = TelemetryRecord.from_dict(json.loads(line))
            out.append(rec if provenance is None else replace(rec, provenance=provenance))
    return out


@dataclass(frozen=True)
class AppKPI:
    continuum: str
    zone: str
    latency_ms: float | None
    throughput_mbps: float
    ready_instances: int
    utilization: float
    replicas: int
    placement: Mapping[str, str]
    # per-replica demand per component
    demands: Mapping[str, ResourceVector]
    latency_components: tuple[str, ...]
    migrating: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "continuum": self.continuum,
            "zone": self.zone,
            "latency_ms": self.latency_ms,
            "throughput_mbps": self.throughput_mbps,
            "ready_instances": self.ready_instances,
            "utilization": self.utilization,
            "replicas": self.replicas,
            "placement": dict(sorted(self.placement.items())),
            "demands": {k: v.to_dict() for k, v in sorted(self.demands.items())},
            "latency_components": list(self.latency_components),
            "migrating": self.migrating,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> AppKPI:
        return cls(
            continuum=d["continuum"],
            zone=d["zone"],
            latency_ms=d["latency_ms"],
            throughput_mbps=d["throughput_mbps"],
            ready_instances=d["ready_instances"],
            utilization=d["utilization"],
            replicas=d["replicas"],
            placement=MappingProxyType(dict(d["placement"])),
            demands=MappingProxyType({k: ResourceVector.from_dict(v) for k, v in d["demands"].items()}),
            latency_components=tuple(d["latency_components"]),
            migrating=d.get("migrating", False),
        )


@dataclass(frozen=True)
class AppStructure:
    """Where an application runs; supplied by the orchestrator, not telemetry."""

    continuum: str
    zone: str
    replicas: int
    placement: Mapping[str, str]
    demands: Mapping[str, ResourceVector]
    latency_components: tuple[str, ...]
    migrating: bool = False


@dataclass(frozen=True)
class Inventory:
    residuals: Mapping[str, ResourceVector] = field(default_factory=dict)
    free_quota: Mapping[str, Mapping[str, ResourceVector]] = field(default_factory=dict)
    apps: Mapping[str, AppStructure] = field(default_factory=dict)


def _frozen(d: Mapping[str, Any]) -> Mapping[str, Any]:
    return MappingProxyType(dict(sorted(d.items())))


@dataclass(frozen=True)
class TwinSnapshot:
    tick: int
    utilization: Mapping[str, float]
    power_w: Mapping[str, float]
    carbon_g_per_h: Mapping[str, float]
    status: Mapping[str, SegmentStatus]
    apps: Mapping[str, AppKPI]
    residuals: Mapping[str, ResourceVector] = field(default_factory=dict)
    free_quota: Mapping[str, Mapping[str, ResourceVector]] = field(default_factory=dict)
    provenance: Mapping[str, Provenance] = field(default_factory=dict)
    saturated: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        for name in ("utilization", "power_w", "carbon_g_per_h", "status", "apps", "residuals", "provenance"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(
            self, "free_quota", _frozen({c: _frozen(q) for c, q in self.free_quota.items()})
        )

    def metric(self, selector: str) -> float:
        """Resolve ``segment:<id>:<metric>`` or ``app:<id>:<metric>``."""
        try:
            kind, entity, name = selector.split(":", 2)
        except ValueError:
            raise MissingMetric(f"malformed selector {selector}") from None
        if kind == "segment":
            table = {
                "cpu_utilization": self.utilization,
                "power_w": self.power_w,
                "carbon_g_per_h": self.carbon_g_per_h,
            }.get(name)
            if table is None or entity not in table:
                raise MissingMetric(f"no metric {selector}")
            return table[entity]
        if kind == "app":
            kpi = self.apps.get(entity)
            value = getattr(kpi, name, None) if kpi is not None and name in _APP_METRICS else None
            if value is None:
                raise MissingMetric(f"no metric {selector}")
            return float(value)
        raise MissingMetric(f"no metric {selector}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "tick": self.tick,
            "utilization": dict(self.utilization),
            "power_w": dict(self.power_w),
            "carbon_g_per_h": dict(self.carbon_g_per_h),
            "status": {k: v.value for k, v in self.status.items()},
            "apps": {k: v.to_dict() for k, v in self.apps.items()},
            "residuals": {k: v.to_dict() for k, v in self.residuals.items()},
            "free_quota": {c: {s: v.to_dict() for s, v in q.items()} for c, q in self.free_quota.items()},
            "provenance": {k: v.value for k, v in self.provenance.items()},
            "saturated": sorted(self.saturated),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> TwinSnapshot:
        return cls(
            tick=d["tick"],
            utilization=d["utilization"],
            power_w=d["power_w"],
            carbon_g_per_h=d["carbon_g_per_h"],
            status={k: SegmentStatus(v) for k, v in d["status"].items()},
            apps={k: AppKPI.from_dict(v) for k, v in d["apps"].items()},
            residuals={k: ResourceVector.from_dict(v) for k, v in d["residuals"].items()},
            free_quota={
                c: {s: ResourceVector.from_dict(v) for s, v in q.items()} for c, q in d["free_quota"].items()
            },
            provenance={k: Provenance(v) for k, v in d.get("provenance", {}).items()},
            saturated=frozenset(d.get("saturated", ())),
        )


_APP_METRICS = frozenset({"latency_ms", "throughput_mbps", "ready_instances", "utilization", "replicas"})


class DigitalTwin:
    """Single-writer mirror of telemetry; snapshots are immutable values."""

    def __init__(self, topology: Topology) -> None:
        self.topology = topology
        self._lock = threading.RLock()
        # (source, metric) -> parallel lists of ticks and (value, provenance)
        self._ticks: dict[tuple[str, str], list[int]] = {}
        self._values: dict[tuple[str, str], list[tuple[float, Provenance]]] = {}
        self._last_tick: dict[str, int] = {}
        self._inventory = Inventory()

    def ingest(self, records: Iterable[TelemetryRecord]) -> None:
        batch = list(records)
        with self._lock:
            last = dict(self._last_tick)
            for rec in batch:
                prev = last.get(rec.source)
                if prev is not None and rec.tick < prev:
                    raise OutOfOrderTelemetry(f"{rec.source}: tick {rec.tick} after {prev}")
                last[rec.source] = rec.tick
            for rec in batch:
                key = (rec.source, rec.metric)
                ticks = self._ticks.setdefault(key, [])
                values = self._values.setdefault(key, [])
                if ticks and ticks[-1] == rec.tick:
                    values[-1] = (rec.value, rec.provenance)
                else:
                    ticks.append(rec.tick)
                    values.append((rec.value, rec.provenance))
            self._last_tick = last

    def import_external(self, path: str) -> int:
        """Load a file of JSON-lines records exposed by an external segment's twin."""
        with open(path, encoding="utf-8") as fh:
            records = parse_telemetry_lines(fh.read(), Provenance.EXTERNAL_TWIN)
        self.ingest(records)
        return len(records)

    def observe_inventory(self, inventory: Inventory) -> None:
        with self._lock:
            self._inventory = inventory

    def _latest(self, source: str, metric: str, tick: int) -> tuple[float, Provenance] | None:
        key = (source, metric)
        ticks = self._ticks.get(key)
        if not ticks:
            return None
        i = bisect.bisect_right(ticks, tick)
        if i == 0:
            return None
        return self._values[key][i - 1]

    def snapshot(self, tick: int) -> TwinSnapshot:
        with self._lock:
            provenance: dict[str, Provenance] = {}

            def read(source: str, metric: str, default: float) -> float:
                hit = self._latest(source, metric, tick)
                if hit is None:
                    return default
                provenance[f"{source}/{metric}"] = hit[1]
                return hit[0]

            util, power, carbon, status = {}, {}, {}, {}
            for seg in self.topology.segments:
                u = min(1.0, max(0.0, read(seg.id, "cpu_utilization", 0.0)))
                if read(seg.id, "failed", 0.0) >= 1.0:
                    st = SegmentStatus.FAILED
                elif read(seg.id, "online", 1.0) < 1.0:
                    st = SegmentStatus.MAINTENANCE
                else:
                    st = SegmentStatus.ONLINE
                p = 0.0 if st is SegmentStatus.FAILED else power_draw(seg, u)
                util[seg.id], power[seg.id], status[seg.id] = u, p, st
                carbon[seg.id] = carbon_rate(seg, p)

            apps = {}
            for app_id, s in self._inventory.apps.items():
                lat = read(app_id, "latency_ms", -1.0)
                apps[app_id] = AppKPI(
                    continuum=s.continuum,
                    zone=s.zone,
                    latency_ms=None if lat < 0 else lat,
                    throughput_mbps=read(app_id, "throughput_mbps", 0.0),
                    ready_instances=int(read(app_id, "ready_instances", 0.0)),
                    utilization=min(1.0, max(0.0, read(app_id, "utilization", 0.0))),
                    replicas=s.replicas,
                    placement=MappingProxyType(dict(s.placement)),
                    demands=MappingProxyType(dict(s.demands)),
                    latency_components=s.latency_components,
                    migrating=s.migrating,
                )
            return TwinSnapshot(
                tick=tick,
                utilization=util,
                power_w=power,
                carbon_g_per_h=carbon,
                status=status,
                apps=apps,
                residuals=dict(self._inventory.residuals),
                free_quota={c: dict(q) for c, q in self._inventory.free_quota.items()},
                provenance=provenance,
            )


def _app_latency(topology: Topology, zone: str, placement: Mapping[str, str], comps: Iterable[str]) -> float:
    return max((user_latency(topology, zone, placement[c]) for c in comps), default=0.0)


def what_if(topology: Topology, snap: TwinSnapshot, proposal: ActuationProposal) -> TwinSnapshot:
    """Analytic projection of ``proposal`` onto ``snap``; the input is left untouched."""
    from aiora.loops import ActionKind

    action = proposal.action
    if action.kind in (ActionKind.RECONFIGURE, ActionKind.NEGOTIATE_QUALITY):
        if action.kind is ActionKind.NEGOTIATE_QUALITY and proposal.app_id not in snap.apps:
            raise UnknownEntity(f"unknown application {proposal.app_id}")
        return snap

    app_id = proposal.app_id
    kpi = snap.apps.get(app_id) if app_id else None
    if kpi is None:
        raise UnknownEntity(f"unknown application {app_id}")

    cpu_delta: dict[str, float] = {}

    def shift(seg_id: str, demand: ResourceVector, sign: int) -> None:
        cap = topology.segment(seg_id).capacity.cpu
        if cap > 0:
            cpu_delta[seg_id] = cpu_delta.get(seg_id, 0.0) + sign * demand.cpu / cap

    placement = dict(kpi.placement)
    replicas = kpi.replicas
    app_util = kpi.utilization
    latency = kpi.latency_ms
    if action.kind in (ActionKind.SCALE_UP, ActionKind.SCALE_DOWN):
        step = action.amount if action.kind is ActionKind.SCALE_UP else -min(action.amount, replicas - 1)
        for comp, seg_id in placement.items():
            shift(seg_id, kpi.demands.get(comp, ZERO) * abs(step), 1 if step > 0 else -1)
        if replicas + step > 0:
            app_util = min(1.0, app_util * replicas / (replicas + step))
        replicas += step
    elif action.kind is ActionKind.MIGRATE:
        comp = action.component
        if comp not in placement:
            raise UnknownEntity(f"unknown component {comp}")
        topology.segment(action.segment)
        demand = kpi.demands.get(comp, ZERO) * replicas
        shift(placement[comp], demand, -1)
        shift(action.segment, demand, 1)
        placement[comp] = action.segment
        latency = _app_latency(topology, kpi.zone, placement, kpi.latency_components)

    util = dict(snap.utilization)
    power = dict(snap.power_w)
    carbon = dict(snap.carbon_g_per_h)
    saturated = set(snap.saturated)
    for seg_id, delta in sorted(cpu_delta.items()):
        seg = topology.segment(seg_id)
        raw = util.get(seg_id, 0.0) + delta
        if raw > 1.0:
            saturated.add(seg_id)
        u = min(1.0, max(0.0, raw))
        util[seg_id] = u
        if snap.status.get(seg_id) is not SegmentStatus.FAILED:
            power[seg_id] = power_draw(seg, u)
            carbon[seg_id] = carbon_rate(seg, power[seg_id])
    apps = dict(snap.apps)
    apps[app_id] = replace(
        kpi,
        placement=MappingProxyType(placement),
        replicas=replicas,
        utilization=app_util,
        latency_ms=latency,
    )
    return replace(
        snap,
        utilization=util,
        power_w=power,
        carbon_g_per_h=carbon,
        apps=apps,
        saturated=frozenset(saturated),
    )
