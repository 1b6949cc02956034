"""Multi-stakeholder topology: stakeholders, segments, links, zones.

Everything here is an immutable value. Latency is the shortest path over
additive one-way link latencies; power is affine in CPU utilization.
"""

from __future__ import annotations

import heapq
import json
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from types import MappingProxyType
from typing import Any

from aiora.errors import TopologyError, UnknownSegment, UtilizationOutOfRange

UNREACHABLE = math.inf

_RESOURCE_KEYS = ("cpu", "memory", "storage", "bandwidth")


class StakeholderRole(str, Enum):
    MNO = "MNO"
    EDGE_PROVIDER = "EdgeProvider"
    APP_PROVIDER = "AppProvider"
    CONTINUUM_BUSINESS_PROVIDER = "ContinuumBusinessProvider"


class SegmentKind(str, Enum):
    RADIO_ACCESS = "RadioAccess"
    EDGE = "Edge"
    CLOUD = "Cloud"


@dataclass(frozen=True)
class ResourceVector:
    """Integer resource amounts: millicores, MB, GB, Mbps.

    ``<=`` is the componentwise partial order, not a total order.
    """

    cpu: int = 0
    memory: int = 0
    storage: int = 0
    bandwidth: int = 0

    def __add__(self, other: ResourceVector) -> ResourceVector:
        return ResourceVector(
            self.cpu + other.cpu,
            self.memory + other.memory,
            self.storage + other.storage,
            self.bandwidth + other.bandwidth,
        )

    def __sub__(self, other: ResourceVector) -> ResourceVector:
        return ResourceVector(
            self.cpu - other.cpu,
            self.memory - other.memory,
            self.storage - other.storage,
            self.bandwidth - other.bandwidth,
        )

    def __mul__(self, k: int) -> ResourceVector:
        if not isinstance(k, int):
            raise TypeError("ResourceVector can only be scaled by an int")
        return ResourceVector(self.cpu * k, self.memory * k, self.storage * k, self.bandwidth * k)

    __rmul__ = __mul__

    def __le__(self, other: ResourceVector) -> bool:
        return (
            self.cpu <= other.cpu
            and self.memory <= other.memory
            and self.storage <= other.storage
            and self.bandwidth <= other.bandwidth
        )

    def __ge__(self, other: ResourceVector) -> bool:
        return other <= self

    def components(self) -> tuple[int, int, int, int]:
        return (self.cpu, self.memory, self.storage, self.bandwidth)

    def is_nonnegative(self) -> bool:
        return min(self.components()) >= 0

    def is_zero(self) -> bool:
        return not any(self.components())

    def clip(self) -> ResourceVector:
        """Componentwise max(0, x)."""
        return ResourceVector(*(max(0, c) for c in self.components()))

    def exceeded(self, limit: ResourceVector) -> list[str]:
        """Names of the components where ``self`` is above ``limit``."""
        return [k for k, a, b in zip(_RESOURCE_KEYS, self.components(), limit.components()) if a > b]

    def to_dict(self) -> dict[str, int]:
        return dict(zip(_RESOURCE_KEYS, self.components()))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | None) -> ResourceVector:
        if data is None:
            return cls()
        extra = set(data) - set(_RESOURCE_KEYS)
        if extra:
            raise TopologyError(f"unknown resource keys: {sorted(extra)}")
        values = []
        for key in _RESOURCE_KEYS:
            v = data.get(key, 0)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
                raise TopologyError(f"resource {key} must be an integer, got {v!r}")
            values.append(int(v))
        return cls(*values)

    @classmethod
    def total(cls, vectors: Iterable[ResourceVector]) -> ResourceVector:
        acc = cls()
        for v in vectors:
            acc = acc + v
        return acc


ZERO = ResourceVector()


@dataclass(frozen=True)
class Agreement:
    peer: str
    fraction: float


@dataclass(frozen=True)
class StakeholderDescriptor:
    id: str
    role: StakeholderRole
    agreements: tuple[Agreement, ...] = ()

    def allowed_fraction(self, consumer: str) -> float:
        """Fraction of this owner's fleet ``consumer`` may hold; 0 without an agreement."""
        if consumer == self.id:
            return 1.0
        for a in self.agreements:
            if a.peer == consumer:
                return a.fraction
        return 0.0


@dataclass(frozen=True)
class SegmentDescriptor:
    id: str
    owner: str
    kind: SegmentKind
    capacity: ResourceVector
    power_idle: float
    power_max: float
    carbon_intensity: float
    zone: str = ""
    unit_cost: float = 0.0


@dataclass(frozen=True)
class LinkDescriptor:
    a: str
    b: str
    latency: float
    bandwidth: float = 0.0

    @property
    def endpoints(self) -> tuple[str, str]:
        return (self.a, self.b)


@dataclass(frozen=True)
class Topology:
    stakeholders: tuple[StakeholderDescriptor, ...] = ()
    segments: tuple[SegmentDescriptor, ...] = ()
    links: tuple[LinkDescriptor, ...] = ()
    # zone id -> {access segment id: access latency ms}
    zones: Mapping[str, Mapping[str, float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        frozen = {z: MappingProxyType(dict(acc)) for z, acc in self.zones.items()}
        object.__setattr__(self, "zones", MappingProxyType(frozen))

    @cached_property
    def segment_map(self) -> Mapping[str, SegmentDescriptor]:
        return MappingProxyType({s.id: s for s in self.segments})

    @cached_property
    def stakeholder_map(self) -> Mapping[str, StakeholderDescriptor]:
        return MappingProxyType({s.id: s for s in self.stakeholders})

    def segment(self, segment_id: str) -> SegmentDescriptor:
        try:
            return self.segment_map[segment_id]
        except KeyError:
            raise UnknownSegment(segment_id) from None

    @cached_property
    def _adjacency(self) -> dict[str, list[tuple[str, float]]]:
        adj: dict[str, list[tuple[str, float]]] = {s.id: [] for s in self.segments}
        for link in self.links:
            if link.a in adj and link.b in adj:
                adj[link.a].append((link.b, link.latency))
                adj[link.b].append((link.a, link.latency))
        return adj

    @cached_property
    def _distances(self) -> dict[str, dict[str, float]]:
        return {s: _dijkstra(self._adjacency, s) for s in sorted(self._adjacency)}

    def without_segment(self, segment_id: str) -> Topology:
        return Topology(
            stakeholders=self.stakeholders,
            segments=tuple(s for s in self.segments if s.id != segment_id),
            links=tuple(l for l in self.links if segment_id not in l.endpoints),
            zones={z: {s: v for s, v in acc.items() if s != segment_id} for z, acc in self.zones.items()},
        )

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        return {
            "stakeholders": [
                {
                    "id": s.id,
                    "role": s.role.value,
                    "agreements": [{"peer": a.peer, "fraction": a.fraction} for a in s.agreements],
                }
                for s in self.stakeholders
            ],
            "segments": [
                {
                    "id": s.id,
                    "owner": s.owner,
                    "kind": s.kind.value,
                    "capacity": s.capacity.to_dict(),
                    "power_idle": s.power_idle,
                    "power_max": s.power_max,
                    "carbon_intensity": s.carbon_intensity,
                    "zone": s.zone,
                    "unit_cost": s.unit_cost,
                }
                for s in self.segments
            ],
            "links": [
                {"a": l.a, "b": l.b, "latency": l.latency, "bandwidth": l.bandwidth} for l in self.links
            ],
            "zones": {z: dict(acc) for z, acc in self.zones.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Topology:
        _reject_unknown(data, {"stakeholders", "segments", "links", "zones"}, "topology")
        try:
            stakeholders = []
            for raw in data.get("stakeholders", []):
                _reject_unknown(raw, {"id", "role", "agreements"}, "stakeholder")
                agreements = []
                for a in raw.get("agreements", []):
                    _reject_unknown(a, {"peer", "fraction"}, "agreement")
                    agreements.append(Agreement(str(a["peer"]), float(a["fraction"])))
                stakeholders.append(
                    StakeholderDescriptor(str(raw["id"]), StakeholderRole(raw["role"]), tuple(agreements))
                )
            segments = []
            seg_keys = {
                "id", "owner", "kind", "capacity", "power_idle", "power_max",
                "carbon_intensity", "zone", "unit_cost",
            }
            for raw in data.get("segments", []):
                _reject_unknown(raw, seg_keys, "segment")
                segments.append(
                    SegmentDescriptor(
                        id=str(raw["id"]),
                        owner=str(raw["owner"]),
                        kind=SegmentKind(raw["kind"]),
                        capacity=ResourceVector.from_dict(raw.get("capacity")),
                        power_idle=float(raw.get("power_idle", 0.0)),
                        power_max=float(raw.get("power_max", 0.0)),
                        carbon_intensity=float(raw.get("carbon_intensity", 0.0)),
                        zone=str(raw.get("zone", "")),
                        unit_cost=float(raw.get("unit_cost", 0.0)),
                    )
                )
            links = []
            for raw in data.get("links", []):
                _reject_unknown(raw, {"a", "b", "latency", "bandwidth"}, "link")
                links.append(
                    LinkDescriptor(
                        str(raw["a"]), str(raw["b"]), float(raw["latency"]), float(raw.get("bandwidth", 0.0))
                    )
                )
            zones = {
                str(z): {str(s): float(v) for s, v in acc.items()}
                for z, acc in data.get("zones", {}).items()
            }
        except (KeyError, ValueError, TypeError, AttributeError) as exc:
            if isinstance(exc, TopologyError):
                raise
            raise TopologyError(f"malformed topology: {exc!r}") from exc
        return cls(tuple(stakeholders), tuple(segments), tuple(links), zones)

    @classmethod
    def load(cls, path: str | Path) -> Topology:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _reject_unknown(data: Any, allowed: set[str], what: str) -> None:
    if not isinstance(data, Mapping):
        raise TopologyError(f"{what} must be an object")
    extra = set(data) - allowed
    if extra:
        raise TopologyError(f"unknown {what} keys: {sorted(extra)}")


def _dijkstra(adj: Mapping[str, list[tuple[str, float]]], source: str) -> dict[str, float]:
    dist = {source: 0.0}
    heap = [(0.0, source)]
    while heap:
        d, node = heapq.heappop(heap)
        if d > dist.get(node, UNREACHABLE):
            continue
        for nxt, w in adj[node]:
            nd = d + w
            if nd < dist.get(nxt, UNREACHABLE):
                dist[nxt] = nd
                heapq.heappush(heap, (nd, nxt))
    return dist


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...] = ()
    warnings: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_topology(t: Topology) -> ValidationReport:
    violations: list[str] = []
    warnings: list[str] = []

    seen: set[str] = set()
    for s in t.stakeholders:
        if s.id in seen:
            violations.append(f"duplicate stakeholder id {s.id}")
        seen.add(s.id)
    for s in t.stakeholders:
        for a in s.agreements:
            if not 0.0 <= a.fraction <= 1.0:
                violations.append(f"stakeholder {s.id}: agreement fraction {a.fraction} outside [0,1]")
            if a.peer not in seen:
                violations.append(f"stakeholder {s.id}: unknown agreement peer {a.peer}")

    seg_ids: set[str] = set()
    for seg in t.segments:
        if seg.id in seg_ids:
            violations.append(f"duplicate segment id {seg.id}")
        seg_ids.add(seg.id)
        if seg.owner not in seen:
            violations.append(f"segment {seg.id}: unknown owner {seg.owner}")
        if not seg.capacity.is_nonnegative():
            violations.append(f"segment {seg.id}: negative capacity")
        if seg.power_idle < 0 or seg.power_max < seg.power_idle:
            violations.append(f"segment {seg.id}: power bounds must satisfy power_max >= power_idle >= 0")
        if seg.carbon_intensity < 0:
            violations.append(f"segment {seg.id}: negative carbon intensity")
        if seg.unit_cost < 0:
            violations.append(f"segment {seg.id}: negative unit cost")

    for link in t.links:
        name = f"link {link.a}-{link.b}"
        for end in link.endpoints:
            if end not in seg_ids:
                violations.append(f"{name}: dangling endpoint {end}")
        if link.a == link.b:
            violations.append(f"{name}: endpoints must be distinct")
        if not link.latency > 0:
            violations.append(f"{name}: non-positive latency")
        if link.bandwidth < 0:
            violations.append(f"{name}: negative bandwidth")

    for zone, access in t.zones.items():
        for seg_id, lat in access.items():
            if seg_id not in seg_ids:
                violations.append(f"zone {zone}: dangling access segment {seg_id}")
            if lat < 0:
                violations.append(f"zone {zone}: negative access latency")

    if not violations and len(t.segments) > 1:
        first = t.segments[0].id
        unreachable = sorted(s for s in seg_ids if path_latency(t, first, s) == UNREACHABLE)
        if unreachable:
            warnings.append(f"latency graph disconnected; unreachable from {first}: {', '.join(unreachable)}")

    return ValidationReport(tuple(violations), tuple(warnings))


def path_latency(t: Topology, src: str, dst: str) -> float:
    """Minimum one-way latency between two segments, ``UNREACHABLE`` if none."""
    t.segment(src)
    t.segment(dst)
    return t._distances[src].get(dst, UNREACHABLE)


def user_latency(t: Topology, zone: str, segment_id: str) -> float:
    """Zone access latency plus path latency, minimized over the zone's access points."""
    access = t.zones.get(zone)
    if access is None:
        return UNREACHABLE
    best = UNREACHABLE
    for access_seg, access_ms in sorted(access.items()):
        if access_seg not in t.segment_map:
            continue
        best = min(best, access_ms + path_latency(t, access_seg, segment_id))
    return best


def power_draw(s: SegmentDescriptor, cpu_utilization: float) -> float:
    if not 0.0 <= cpu_utilization <= 1.0:
        raise UtilizationOutOfRange(f"utilization {cpu_utilization} outside [0,1]")
    return s.power_idle + cpu_utilization * (s.power_max - s.power_idle)


def carbon_rate(s: SegmentDescriptor, watts: float) -> float:
    """gCO2 per hour for a constant draw of ``watts``."""
    return watts / 1000.0 * s.carbon_intensity
