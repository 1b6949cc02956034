"""Multi-objective component placement.

The objective is a weighted sum of four normalized terms:

* latency: worst zone-to-component latency over EAS components (over all
  components when the application declares no EAS), normalized by
  ``max_latency``;
* energy: marginal power of every component, normalized by the fleet's
  summed ``power_max``;
* carbon: marginal carbon rate, normalized by ``carbon_cap`` (or the largest
  per-segment carbon rate in the fleet);
* money: per-hour cost, normalized by the largest unit cost times the
  application's CPU cores.

Search is a depth-first branch and bound over components in declaration
order and segments in id order. Every term only grows as components are
added, so a partial cost is a valid lower bound and the first optimum found
is the lexicographically smallest one.
"""

from __future__ import annotations

import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from enum import Enum
from types import MappingProxyType
from typing import Any

from aiora.errors import (
    ConstraintViolation,
    Infeasible,
    UnknownComponent,
    UnknownSegment,
)
from aiora.model import UNREACHABLE, ResourceVector, Topology, carbon_rate, user_latency

_REL_TOL = 1e-12


class ComponentRole(str, Enum):
    EAS = "EAS"
    EES = "EES"
    ECS = "ECS"
    GENERIC = "Generic"


class AvailabilityClass(str, Enum):
    BEST_EFFORT = "BestEffort"
    HIGH = "High"


@dataclass(frozen=True)
class ComponentSpec:
    id: str
    demand: ResourceVector
    role: ComponentRole = ComponentRole.GENERIC
    colocation: frozenset[str] = frozenset()
    anti_affinity: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if self.colocation & self.anti_affinity:
            raise ValueError(f"component {self.id}: colocation and anti_affinity overlap")

    def scaled(self, replicas: int) -> ComponentSpec:
        return ComponentSpec(self.id, self.demand * replicas, self.role, self.colocation, self.anti_affinity)


@dataclass(frozen=True)
class ServiceRequirements:
    user_zone: str
    max_latency: float
    min_throughput: float = 0.0
    data_locality: frozenset[str] | None = None
    carbon_cap: float | None = None
    availability_class: AvailabilityClass = AvailabilityClass.BEST_EFFORT

    def __post_init__(self) -> None:
        if not self.max_latency > 0:
            raise ValueError("max_latency must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {
            "user_zone": self.user_zone,
            "max_latency": self.max_latency,
            "min_throughput": self.min_throughput,
            "data_locality": sorted(self.data_locality) if self.data_locality is not None else None,
            "carbon_cap": self.carbon_cap,
            "availability_class": self.availability_class.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ServiceRequirements:
        loc = d.get("data_locality")
        return cls(
            user_zone=str(d["user_zone"]),
            max_latency=float(d["max_latency"]),
            min_throughput=float(d.get("min_throughput", 0.0)),
            data_locality=frozenset(loc) if loc is not None else None,
            carbon_cap=float(d["carbon_cap"]) if d.get("carbon_cap") is not None else None,
            availability_class=AvailabilityClass(d.get("availability_class", "BestEffort")),
        )


@dataclass(frozen=True)
class ApplicationDescriptor:
    id: str
    provider: str
    components: tuple[ComponentSpec, ...]
    requirements: ServiceRequirements

    def __post_init__(self) -> None:
        if not self.components:
            raise ValueError(f"application {self.id} needs at least one component")
        ids = [c.id for c in self.components]
        if len(set(ids)) != len(ids):
            raise ValueError(f"application {self.id} has duplicate component ids")
        known = set(ids)
        for c in self.components:
            unknown = (c.colocation | c.anti_affinity) - known
            if unknown:
                raise UnknownComponent(f"component {c.id} refers to unknown {sorted(unknown)}")

    def component(self, component_id: str) -> ComponentSpec:
        for c in self.components:
            if c.id == component_id:
                return c
        raise UnknownComponent(f"unknown component {component_id}")

    def latency_components(self) -> tuple[ComponentSpec, ...]:
        eas = tuple(c for c in self.components if c.role is ComponentRole.EAS)
        return eas or self.components

    def with_requirements(self, requirements: ServiceRequirements) -> ApplicationDescriptor:
        return ApplicationDescriptor(self.id, self.provider, self.components, requirements)

    def scaled(self, replicas: int) -> ApplicationDescriptor:
        if replicas == 1:
            return self
        return ApplicationDescriptor(
            self.id, self.provider, tuple(c.scaled(replicas) for c in self.components), self.requirements
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "provider": self.provider,
            "components": [
                {
                    "id": c.id,
                    "demand": c.demand.to_dict(),
                    "role": c.role.value,
                    "colocation": sorted(c.colocation),
                    "anti_affinity": sorted(c.anti_affinity),
                }
                for c in self.components
            ],
            "requirements": self.requirements.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ApplicationDescriptor:
        comps = tuple(
            ComponentSpec(
                id=str(c["id"]),
                demand=ResourceVector.from_dict(c.get("demand")),
                role=ComponentRole(c.get("role", "Generic")),
                colocation=frozenset(c.get("colocation", ())),
                anti_affinity=frozenset(c.get("anti_affinity", ())),
            )
            for c in d["components"]
        )
        return cls(str(d["id"]), str(d.get("provider", "")), comps, ServiceRequirements.from_dict(d["requirements"]))


@dataclass(frozen=True)
class ObjectiveWeights:
    w_latency: float = 0.0
    w_energy: float = 0.0
    w_carbon: float = 0.0
    w_cost: float = 0.0
    # explicit normalization constants; derived from topology/app when None
    norm_latency: float | None = None
    norm_energy: float | None = None
    norm_carbon: float | None = None
    norm_cost: float | None = None

    def __post_init__(self) -> None:
        ws = (self.w_latency, self.w_energy, self.w_carbon, self.w_cost)
        if min(ws) < 0 or not max(ws) > 0:
            raise ValueError("weights must be non-negative with at least one positive")

    def scaled(self, k: float) -> ObjectiveWeights:
        return ObjectiveWeights(
            self.w_latency * k, self.w_energy * k, self.w_carbon * k, self.w_cost * k,
            self.norm_latency, self.norm_energy, self.norm_carbon, self.norm_cost,
        )

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ObjectiveWeights:
        allowed = {f for f in cls.__dataclass_fields__}
        extra = set(d) - allowed
        if extra:
            raise ValueError(f"unknown weight keys: {sorted(extra)}")
        return cls(**{k: (float(v) if v is not None else None) for k, v in d.items()})


@dataclass(frozen=True)
class CostBreakdown:
    latency_ms: float
    energy_watts: float
    carbon_g_per_h: float
    money_per_h: float
    scalar: float

    def to_dict(self) -> dict[str, float]:
        return {
            "latency_ms": self.latency_ms,
            "energy_watts": self.energy_watts,
            "carbon_g_per_h": self.carbon_g_per_h,
            "money_per_h": self.money_per_h,
            "scalar": self.scalar,
        }


@dataclass(frozen=True)
class PlacementPlan:
    assignment: Mapping[str, str]
    cost: CostBreakdown

    def __post_init__(self) -> None:
        object.__setattr__(self, "assignment", MappingProxyType(dict(self.assignment)))

    def moves_from(self, other: Mapping[str, str]) -> int:
        return sum(1 for c, s in self.assignment.items() if other.get(c) != s)

    def to_dict(self) -> dict[str, Any]:
        return {"assignment": dict(self.assignment), "cost": self.cost.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> PlacementPlan:
        return cls(dict(d["assignment"]), CostBreakdown(**d["cost"]))


@dataclass(frozen=True)
class Normalizers:
    latency: float
    energy: float
    carbon: float
    cost: float


def normalizers(t: Topology, app: ApplicationDescriptor, w: ObjectiveWeights) -> Normalizers:
    req = app.requirements
    segs = t.segments
    energy = sum(s.power_max for s in segs)
    if req.carbon_cap is not None and req.carbon_cap > 0:
        carbon = req.carbon_cap
    else:
        carbon = max((carbon_rate(s, s.power_max) for s in segs), default=0.0)
    cores = sum(c.demand.cpu for c in app.components) / 1000.0
    cost = max((s.unit_cost for s in segs), default=0.0) * (cores if cores > 0 else 1.0)
    return Normalizers(
        latency=_positive(w.norm_latency, req.max_latency),
        energy=_positive(w.norm_energy, energy),
        carbon=_positive(w.norm_carbon, carbon),
        cost=_positive(w.norm_cost, cost),
    )


def _positive(explicit: float | None, derived: float) -> float:
    value = explicit if explicit is not None else derived
    return value if value > 0 else 1.0


@dataclass
class _Option:
    """One component on one segment: unary feasibility plus additive terms."""

    segment: str
    violations: list[tuple[str, str]]
    latency: float
    energy: float
    carbon: float
    money: float


class _Problem:
    def __init__(
        self,
        t: Topology,
        app: ApplicationDescriptor,
        w: ObjectiveWeights,
        available: Mapping[str, ResourceVector] | None,
    ) -> None:
        self.t = t
        self.app = app
        self.w = w
        self.norm = normalizers(t, app, w)
        if available is None:
            available = {s.id: s.capacity for s in t.segments}
        for sid in available:
            t.segment(sid)
        self.available = dict(available)
        self.segment_ids = sorted(available)
        self.comp_index = {c.id: i for i, c in enumerate(app.components)}
        latency_ids = {c.id for c in app.latency_components()}
        self.options: list[dict[str, _Option]] = []
        for comp in app.components:
            per_seg = {}
            for sid in self.segment_ids:
                per_seg[sid] = self._option(comp, sid, comp.id in latency_ids)
            self.options.append(per_seg)

    def _option(self, comp: ComponentSpec, sid: str, bears_latency: bool) -> _Option:
        seg = self.t.segment(sid)
        req = self.app.requirements
        violations: list[tuple[str, str]] = []
        where = f"{comp.id} on {sid}"
        if not comp.demand <= self.available[sid]:
            violations.append(("capacity", f"{where}: {', '.join(comp.demand.exceeded(self.available[sid]))}"))
        if (
            req.data_locality is not None
            and comp.demand.storage > 0
            and seg.zone not in req.data_locality
        ):
            violations.append(("locality", f"{where}: zone {seg.zone} not allowed for data"))
        latency = 0.0
        if bears_latency:
            latency = user_latency(self.t, req.user_zone, sid)
            if latency == UNREACHABLE:
                violations.append(("latency", f"{where}: unreachable from zone {req.user_zone}"))
            elif latency > req.max_latency:
                violations.append(("latency", f"{where}: {latency:g} ms > {req.max_latency:g} ms"))
            if req.min_throughput > seg.capacity.bandwidth:
                violations.append(("throughput", f"{where}: bandwidth below {req.min_throughput:g} Mbps"))
        if seg.capacity.cpu > 0:
            energy = (seg.power_max - seg.power_idle) * comp.demand.cpu / seg.capacity.cpu
        else:
            energy = 0.0
        carbon = carbon_rate(seg, energy)
        if req.carbon_cap is not None and carbon > req.carbon_cap:
            violations.append(("carbon", f"{where}: {carbon:g} g/h > cap {req.carbon_cap:g}"))
        money = seg.unit_cost * comp.demand.cpu / 1000.0
        return _Option(sid, violations, latency, energy, carbon, money)

    def scalar(self, latency: float, energy: float, carbon: float, money: float) -> float:
        w, n = self.w, self.norm
        return (
            w.w_latency * latency / n.latency
            + w.w_energy * energy / n.energy
            + w.w_carbon * carbon / n.carbon
            + w.w_cost * money / n.cost
        )

    def pair_violation(self, i: int, sid: str, assign: Sequence[str]) -> tuple[str, str] | None:
        comp = self.app.components[i]
        for j in range(i):
            other = self.app.components[j]
            linked_co = other.id in comp.colocation or comp.id in other.colocation
            linked_anti = other.id in comp.anti_affinity or comp.id in other.anti_affinity
            if linked_co and assign[j] != sid:
                return ("colocation", f"{comp.id} and {other.id} must share a segment")
            if linked_anti and assign[j] == sid:
                return ("anti_affinity", f"{comp.id} and {other.id} must not share {sid}")
        return None

    def evaluate(self, assignment: Mapping[str, str]) -> tuple[CostBreakdown, list[tuple[str, str]]]:
        """Full cost and every violation for a total assignment."""
        for comp in self.app.components:
            if comp.id not in assignment:
                raise UnknownComponent(f"assignment misses component {comp.id}")
        for cid, sid in assignment.items():
            if cid not in self.comp_index:
                raise UnknownComponent(f"unknown component {cid}")
            if sid not in self.available:
                if sid not in self.t.segment_map:
                    raise UnknownSegment(sid)
        violations: list[tuple[str, str]] = []
        assign = [assignment[c.id] for c in self.app.components]
        used: dict[str, ResourceVector] = {}
        lat = energy = carbon = money = 0.0
        for i, comp in enumerate(self.app.components):
            sid = assign[i]
            if sid not in self.available:
                violations.append(("capacity", f"{comp.id}: segment {sid} not available"))
                continue
            opt = self.options[i][sid]
            violations.extend(v for v in opt.violations if v[0] not in ("capacity", "carbon"))
            used[sid] = used.get(sid, ResourceVector()) + comp.demand
            lat = max(lat, opt.latency)
            energy += opt.energy
            carbon += opt.carbon
            money += opt.money
            pv = self.pair_violation(i, sid, assign)
            if pv:
                violations.append(pv)
        for sid, total in sorted(used.items()):
            if not total <= self.available[sid]:
                violations.append(("capacity", f"{sid}: {', '.join(total.exceeded(self.available[sid]))}"))
        cap = self.app.requirements.carbon_cap
        if cap is not None and carbon > cap:
            violations.append(("carbon", f"{carbon:g} g/h > cap {cap:g}"))
        cost = CostBreakdown(lat, energy, carbon, money, self.scalar(lat, energy, carbon, money))
        return cost, violations


def check_assignment(
    t: Topology,
    app: ApplicationDescriptor,
    assignment: Mapping[str, str],
    w: ObjectiveWeights,
    available: Mapping[str, ResourceVector] | None = None,
) -> tuple[CostBreakdown, list[tuple[str, str]]]:
    """Cost and the full list of ``(kind, detail)`` violations, without raising on them."""
    return _Problem(t, app, w, available).evaluate(assignment)


def score_placement(
    t: Topology,
    app: ApplicationDescriptor,
    assignment: Mapping[str, str],
    w: ObjectiveWeights,
    available: Mapping[str, ResourceVector] | None = None,
) -> CostBreakdown:
    """Cost of a total assignment; raises ConstraintViolation if any constraint is broken.

    ``available`` is the residual per usable segment (defaults to raw capacity
    of every topology segment).
    """
    cost, violations = _Problem(t, app, w, available).evaluate(assignment)
    if violations:
        raise ConstraintViolation(violations)
    return cost


def _better(a: tuple[int, float], b: tuple[int, float] | None) -> bool:
    if b is None:
        return True
    if a[0] != b[0]:
        return a[0] < b[0]
    return a[1] < b[1] - _REL_TOL * max(1.0, abs(b[1]))


def _search(
    prob: _Problem,
    current: Mapping[str, str] | None = None,
    move_penalty: float = 0.0,
) -> PlacementPlan:
    comps = prob.app.components
    n = len(comps)
    lexicographic_moves = math.isinf(move_penalty)
    cap = prob.app.requirements.carbon_cap
    blocking: dict[str, str] = {}

    best_key: tuple[int, float] | None = None
    best_assign: list[str] | None = None
    best_terms: tuple[float, float, float, float] | None = None
    assign: list[str] = [""] * n
    used: dict[str, ResourceVector] = {sid: ResourceVector() for sid in prob.segment_ids}

    def key(lat: float, energy: float, carbon: float, money: float, moves: int) -> tuple[int, float]:
        s = prob.scalar(lat, energy, carbon, money)
        if lexicographic_moves:
            return (moves, s)
        return (0, s + move_penalty * moves if moves else s)

    def block(kind: str, detail: str) -> None:
        blocking.setdefault(kind, detail)

    def visit(i: int, lat: float, energy: float, carbon: float, money: float, moves: int) -> None:
        nonlocal best_key, best_assign, best_terms
        if i == n:
            k = key(lat, energy, carbon, money, moves)
            if _better(k, best_key):
                best_key, best_assign, best_terms = k, list(assign), (lat, energy, carbon, money)
            return
        comp = comps[i]
        for sid in prob.segment_ids:
            opt = prob.options[i][sid]
            if opt.violations:
                for kind, detail in opt.violations:
                    block(kind, detail)
                continue
            new_used = used[sid] + comp.demand
            if not new_used <= prob.available[sid]:
                block("capacity", f"{sid}: combined demand exceeds residual")
                continue
            pv = prob.pair_violation(i, sid, assign)
            if pv:
                block(*pv)
                continue
            n_carbon = carbon + opt.carbon
            if cap is not None and n_carbon > cap:
                block("carbon", f"combined carbon {n_carbon:g} g/h > cap {cap:g}")
                continue
            n_lat = max(lat, opt.latency)
            n_energy = energy + opt.energy
            n_money = money + opt.money
            n_moves = moves + (1 if current is not None and current.get(comp.id) != sid else 0)
            if best_key is not None and not _better(key(n_lat, n_energy, n_carbon, n_money, n_moves), best_key):
                continue
            assign[i] = sid
            used[sid] = new_used
            visit(i + 1, n_lat, n_energy, n_carbon, n_money, n_moves)
            used[sid] = new_used - comp.demand
            assign[i] = ""

    visit(0, 0.0, 0.0, 0.0, 0.0, 0)
    if best_assign is None or best_terms is None:
        if not prob.segment_ids:
            blocking.setdefault("capacity", "no available segments")
        raise Infeasible(sorted(blocking.items()))
    lat, energy, carbon, money = best_terms
    cost = CostBreakdown(lat, energy, carbon, money, prob.scalar(lat, energy, carbon, money))
    return PlacementPlan({c.id: s for c, s in zip(comps, best_assign)}, cost)


def place(
    t: Topology,
    app: ApplicationDescriptor,
    w: ObjectiveWeights,
    available: Mapping[str, ResourceVector] | None = None,
) -> PlacementPlan:
    """Cheapest feasible plan; ties go to the lexicographically smallest assignment.

    Raises Infeasible with the blocking constraint kinds met during search.
    """
    return _search(_Problem(t, app, w, available))


def replan_migration(
    current: PlacementPlan | Mapping[str, str],
    t: Topology,
    app: ApplicationDescriptor,
    w: ObjectiveWeights,
    move_penalty: float,
    available: Mapping[str, ResourceVector] | None = None,
) -> PlacementPlan:
    """Re-place ``app`` charging ``move_penalty`` per component that changes segment.

    ``available`` must already count the application's own current usage as
    free, since the plan may keep components where they are.
    """
    if move_penalty < 0:
        raise ValueError("move_penalty must be non-negative")
    assignment = current.assignment if isinstance(current, PlacementPlan) else current
    prob = _Problem(t, app, w, available)
    if math.isinf(move_penalty):
        if all(s in prob.available for s in assignment.values()) and set(assignment) == set(prob.comp_index):
            cost, violations = prob.evaluate(assignment)
            if not violations:
                return PlacementPlan(assignment, cost)
    return _search(prob, current=assignment, move_penalty=move_penalty)

