"""Life-cycle manager for virtual continuums and the applications inside them.

Applications bind against their continuum's quota (the Held reservations it
owns), never against raw segment capacity. Migrations open a window during
which a component may have two instances; with make-before-break the old
one keeps serving until the new one is Ready.
"""

from __future__ import annotations

import threading
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from aiora.broker import ResourceBroker, SegmentFilter
from aiora.errors import (
    AgreementExceeded,
    ContinuumNotActive,
    IllegalTransition,
    Infeasible,
    InsufficientCapacity,
    MigrationInProgress,
    PlanesIncomplete,
    UnauthorizedScenario,
    UnknownApplication,
    UnknownContinuum,
)
from aiora.exposure import BusinessScenario, EntityClass, OperationKind, authorize
from aiora.model import ZERO, ResourceVector, Topology
from aiora.placement import (
    ApplicationDescriptor,
    ObjectiveWeights,
    PlacementPlan,
    check_assignment,
    place,
)

DEFAULT_STARTUP_DELAY = 2


class ContinuumState(str, Enum):
    PREPARED = "Prepared"
    INSTANTIATED = "Instantiated"
    ACTIVE = "Active"
    MAINTENANCE = "Maintenance"
    MODIFYING = "Modifying"
    TERMINATED = "Terminated"


TRANSITIONS: Mapping[ContinuumState, frozenset[ContinuumState]] = {
    ContinuumState.PREPARED: frozenset({ContinuumState.INSTANTIATED, ContinuumState.TERMINATED}),
    ContinuumState.INSTANTIATED: frozenset({ContinuumState.ACTIVE, ContinuumState.TERMINATED}),
    ContinuumState.ACTIVE: frozenset(
        {ContinuumState.MAINTENANCE, ContinuumState.MODIFYING, ContinuumState.TERMINATED}
    ),
    ContinuumState.MAINTENANCE: frozenset({ContinuumState.ACTIVE, ContinuumState.TERMINATED}),
    ContinuumState.MODIFYING: frozenset({ContinuumState.ACTIVE}),
    ContinuumState.TERMINATED: frozenset(),
}


class Plane(str, Enum):
    USER = "User"
    CONTROL = "Control"
    CLOUD = "Cloud"
    MANAGEMENT = "Management"
    INTELLIGENCE = "Intelligence"


ALL_PLANES = frozenset(Plane)


class InstanceState(str, Enum):
    STARTING = "Starting"
    READY = "Ready"
    DRAINING = "Draining"
    STOPPED = "Stopped"


class MigrationMode(str, Enum):
    MAKE_BEFORE_BREAK = "MakeBeforeBreak"
    BREAK_BEFORE_MAKE = "BreakBeforeMake"


@dataclass
class Instance:
    segment: str
    state: InstanceState
    ready_at: int | None = None
    stop_at: int | None = None

    def consumes(self) -> bool:
        return self.state is not InstanceState.STOPPED


@dataclass
class DeploymentRecord:
    app_id: str
    app: ApplicationDescriptor
    weights: ObjectiveWeights
    plan: PlacementPlan
    instances: dict[str, list[Instance]]
    replicas: int = 1

    def ready_count(self, component_id: str) -> int:
        return sum(1 for i in self.instances.get(component_id, []) if i.state is InstanceState.READY)

    def in_migration(self, component_id: str) -> bool:
        insts = self.instances.get(component_id, [])
        return len(insts) > 1 or any(i.state is InstanceState.STARTING for i in insts)

    def to_dict(self) -> dict[str, Any]:
        return {
            "app_id": self.app_id,
            "replicas": self.replicas,
            "plan": self.plan.to_dict(),
            "instances": {
                cid: [{"segment": i.segment, "state": i.state.value} for i in insts]
                for cid, insts in sorted(self.instances.items())
            },
        }


@dataclass
class VirtualContinuum:
    id: str
    business_provider: str
    scenario: BusinessScenario | None
    quotas: list[str] = field(default_factory=list)
    state: ContinuumState = ContinuumState.PREPARED
    deployed_apps: dict[str, DeploymentRecord] = field(default_factory=dict)
    loops: list[str] = field(default_factory=list)
    planes: set[Plane] = field(default_factory=lambda: set(ALL_PLANES))
    config: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "business_provider": self.business_provider,
            "scenario": self.scenario.to_dict() if self.scenario else None,
            "quotas": list(self.quotas),
            "state": self.state.value,
            "deployed_apps": sorted(self.deployed_apps),
            "loops": list(self.loops),
            "planes": sorted(p.value for p in self.planes),
        }


@dataclass(frozen=True)
class ContinuumRequest:
    id: str
    provider: str
    quotas: tuple[tuple[str, ResourceVector], ...]
    scenario: BusinessScenario | None = None
    planes: frozenset[Plane] = ALL_PLANES

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], scenario: BusinessScenario | None = None) -> ContinuumRequest:
        return cls(
            id=str(d["id"]),
            provider=str(d["provider"]),
            quotas=tuple(
                (str(q["segment"]), ResourceVector.from_dict(q.get("amount"))) for q in d.get("quotas", [])
            ),
            scenario=scenario,
            planes=frozenset(Plane(p) for p in d.get("planes", [p.value for p in Plane])),
        )


@dataclass(frozen=True)
class MigrationReport:
    app_id: str
    component_id: str
    source: str | None
    target: str
    mode: MigrationMode
    downtime_ticks: int
    ready_at: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "app_id": self.app_id,
            "component_id": self.component_id,
            "source": self.source,
            "target": self.target,
            "mode": self.mode.value,
            "downtime_ticks": self.downtime_ticks,
            "ready_at": self.ready_at,
        }


class LifecycleManager:
    def __init__(
        self,
        topology: Topology,
        broker: ResourceBroker,
        startup_delay: int = DEFAULT_STARTUP_DELAY,
    ) -> None:
        if startup_delay < 0:
            raise ValueError("startup_delay must be >= 0")
        self.topology = topology
        self.broker = broker
        self.startup_delay = startup_delay
        self.now = 0
        self._lock = threading.RLock()
        self._continuums: dict[str, VirtualContinuum] = {}

    # -- queries ---------------------------------------------------------
    def continuum(self, cid: str) -> VirtualContinuum:
        try:
            return self._continuums[cid]
        except KeyError:
            raise UnknownContinuum(f"unknown continuum {cid}") from None

    def continuums(self) -> list[VirtualContinuum]:
        return [c for _, c in sorted(self._continuums.items())]

    def state_name(self, cid: str) -> str | None:
        c = self._continuums.get(cid)
        return c.state.value if c else None

    def deployment(self, cid: str, app_id: str) -> DeploymentRecord:
        try:
            return self.continuum(cid).deployed_apps[app_id]
        except KeyError:
            raise UnknownApplication(f"unknown application {app_id} in {cid}") from None

    def quota(self, cid: str) -> dict[str, ResourceVector]:
        out: dict[str, ResourceVector] = {}
        for rid in self.continuum(cid).quotas:
            r = self.broker.reservation(rid)
            if r.state.value == "Held":
                out[r.segment_id] = out.get(r.segment_id, ZERO) + r.amount
        return dict(sorted(out.items()))

    def used(self, cid: str, exclude: tuple[str, str] | None = None) -> dict[str, ResourceVector]:
        """Quota consumed by live instances; ``exclude`` skips one (app, component)."""
        out: dict[str, ResourceVector] = {}
        for app_id, rec in self.continuum(cid).deployed_apps.items():
            for comp in rec.app.components:
                if exclude == (app_id, comp.id):
                    continue
                demand = comp.demand * rec.replicas
                for inst in rec.instances.get(comp.id, []):
                    if inst.consumes():
                        out[inst.segment] = out.get(inst.segment, ZERO) + demand
        return dict(sorted(out.items()))

    def free_quota(self, cid: str, online_only: bool = False) -> dict[str, ResourceVector]:
        used = self.used(cid)
        out = {}
        for sid, q in self.quota(cid).items():
            if online_only and not self.broker.is_online(sid):
                continue
            out[sid] = q - used.get(sid, ZERO)
        return out

    # -- continuums --------------------------------------------------------
    def create_continuum(self, req: ContinuumRequest) -> VirtualContinuum:
        with self._lock:
            if req.id in self._continuums:
                raise ValueError(f"continuum {req.id} already exists")
            if req.scenario is not None:
                decision = authorize(
                    req.provider,
                    OperationKind.OFFER,
                    EntityClass.CONTINUUM,
                    req.scenario,
                    set(self.topology.stakeholder_map),
                )
                if not decision:
                    raise UnauthorizedScenario(decision.reason)
            merged: dict[str, ResourceVector] = {}
            for sid, amount in req.quotas:
                self.topology.segment(sid)
                merged[sid] = merged.get(sid, ZERO) + amount
            report = self.broker.query_feasibility(
                [(SegmentFilter.only(sid), amount) for sid, amount in sorted(merged.items())]
            )
            if not report.feasible:
                raise Infeasible(list(report.blocking))
            self.broker.bind_continuum(req.id, req.provider)
            taken: list[str] = []
            try:
                for sid, amount in sorted(merged.items()):
                    taken.append(self.broker.reserve(req.id, sid, amount).id)
            except (InsufficientCapacity, AgreementExceeded) as exc:
                for rid in taken:
                    self.broker.release(rid)
                kind = "agreement" if isinstance(exc, AgreementExceeded) else "capacity"
                raise Infeasible([(kind, str(exc))]) from exc
            cont = VirtualContinuum(
                req.id, req.provider, req.scenario, quotas=taken, planes=set(req.planes)
            )
            self._continuums[req.id] = cont
            return cont

    def transition(self, cid: str, to: ContinuumState) -> None:
        with self._lock:
            cont = self.continuum(cid)
            to = ContinuumState(to)
            if to not in TRANSITIONS[cont.state]:
                raise IllegalTransition(f"{cid}: {cont.state.value} -> {to.value} not allowed")
            if to is ContinuumState.ACTIVE and cont.planes != ALL_PLANES:
                missing = sorted(p.value for p in ALL_PLANES - cont.planes)
                raise PlanesIncomplete(f"{cid}: missing planes {', '.join(missing)}")
            if to is ContinuumState.TERMINATED:
                for app_id in sorted(cont.deployed_apps):
                    self._stop_all(cont.deployed_apps[app_id])
                cont.deployed_apps.clear()
                for rid in cont.quotas:
                    if self.broker.reservation(rid).state.value == "Held":
                        self.broker.release(rid)
            cont.state = to

    def set_planes(self, cid: str, planes: Iterable[Plane]) -> None:
        with self._lock:
            cont = self.continuum(cid)
            if cont.state not in (
                ContinuumState.PREPARED,
                ContinuumState.INSTANTIATED,
                ContinuumState.MODIFYING,
            ):
                raise IllegalTransition(f"{cid}: planes can't change while {cont.state.value}")
            cont.planes = {Plane(p) for p in planes}

    def modify_continuum(
        self,
        cid: str,
        add_quotas: Sequence[tuple[str, ResourceVector]] = (),
        planes: Iterable[Plane] | None = None,
        config: Mapping[str, Any] | None = None,
    ) -> None:
        """Apply quota growth, plane and config changes atomically through Modifying."""
        with self._lock:
            cont = self.continuum(cid)
            self.transition(cid, ContinuumState.MODIFYING)
            old_planes, old_config = set(cont.planes), dict(cont.config)
            taken: list[str] = []
            try:
                for sid, amount in add_quotas:
                    taken.append(self.broker.reserve(cid, sid, amount).id)
                if planes is not None:
                    cont.planes = {Plane(p) for p in planes}
                if config:
                    cont.config.update(config)
                if cont.planes != ALL_PLANES:
                    raise PlanesIncomplete(f"{cid}: modification would drop planes")
            except Exception:
                for rid in taken:
                    self.broker.release(rid)
                cont.planes, cont.config = old_planes, old_config
                cont.state = ContinuumState.ACTIVE
                raise
            cont.quotas.extend(taken)
            cont.state = ContinuumState.ACTIVE

    def expand_quota(self, cid: str, segment_id: str, amount: ResourceVector) -> str:
        """Reserve more of a segment for an Active continuum; returns the reservation id."""
        with self._lock:
            cont = self.continuum(cid)
            if cont.state is not ContinuumState.ACTIVE:
                raise ContinuumNotActive(f"continuum {cid} is {cont.state.value}")
            rid = self.broker.reserve(cid, segment_id, amount).id
            cont.quotas.append(rid)
            return rid

    def _ensure_quota(self, cid: str, segment_id: str, need: ResourceVector, expand: bool) -> None:
        free = self.free_quota(cid).get(segment_id, ZERO)
        if need <= free:
            return
        shortfall = (need - free).clip()
        if not expand:
            raise Infeasible([("quota", f"{segment_id}: {', '.join(need.exceeded(free))} exceed free quota")])
        try:
            self.expand_quota(cid, segment_id, shortfall)
        except (InsufficientCapacity, AgreementExceeded) as exc:
            kind = "agreement" if isinstance(exc, AgreementExceeded) else "capacity"
            raise Infeasible([(kind, str(exc))]) from exc

    # -- applications --------------------------------------------------------
    def _require_active(self, cid: str) -> VirtualContinuum:
        cont = self.continuum(cid)
        if cont.state is not ContinuumState.ACTIVE:
            raise ContinuumNotActive(f"continuum {cid} is {cont.state.value}")
        return cont

    def deploy_application(
        self, cid: str, app: ApplicationDescriptor, w: ObjectiveWeights
    ) -> DeploymentRecord:
        with self._lock:
            cont = self._require_active(cid)
            if app.id in cont.deployed_apps:
                raise ValueError(f"application {app.id} already deployed in {cid}")
            available = {
                sid: free for sid, free in self.free_quota(cid, online_only=True).items()
                if free.is_nonnegative()
            }
            plan = place(self.topology, app, w, available)
            instances = {
                comp: [Instance(sid, InstanceState.READY, ready_at=self.now)]
                for comp, sid in plan.assignment.items()
            }
            rec = DeploymentRecord(app.id, app, w, plan, instances)
            cont.deployed_apps[app.id] = rec
            return rec

    def migrate_component(
        self,
        cid: str,
        app_id: str,
        component_id: str,
        target: str,
        mode: MigrationMode = MigrationMode.MAKE_BEFORE_BREAK,
        expand_quota: bool = False,
    ) -> MigrationReport:
        with self._lock:
            self._require_active(cid)
            rec = self.deployment(cid, app_id)
            comp = rec.app.component(component_id)
            mode = MigrationMode(mode)
            self.topology.segment(target)
            if rec.in_migration(component_id):
                raise MigrationInProgress(f"{app_id}/{component_id} is already migrating")
            if not self.broker.is_online(target):
                raise Infeasible([("availability", f"{target} is offline")])
            current = [i for i in rec.instances.get(component_id, []) if i.consumes()]
            source = current[0].segment if current else None
            if source == target:
                raise Infeasible([("noop", f"{component_id} already on {target}")])
            new_assignment = dict(rec.plan.assignment)
            new_assignment[component_id] = target
            scaled = rec.app.scaled(rec.replicas)
            _, before = check_assignment(self.topology, scaled, rec.plan.assignment, rec.weights)
            cost, after = check_assignment(self.topology, scaled, new_assignment, rec.weights)
            # only violations the move introduces count against it
            hard = [v for v in after if v[0] != "capacity" and v not in before]
            if hard:
                raise Infeasible(hard)
            self._ensure_quota(cid, target, comp.demand * rec.replicas, expand_quota)

            delay = self.startup_delay
            new = Instance(target, InstanceState.STARTING, ready_at=self.now + delay)
            if mode is MigrationMode.BREAK_BEFORE_MAKE:
                for inst in current:
                    inst.state = InstanceState.STOPPED
                rec.instances[component_id] = [new]
                downtime = delay if current else 0
            else:
                rec.instances[component_id] = current + [new]
                downtime = 0
            if delay == 0:
                self._promote(rec, component_id)
            rec.plan = PlacementPlan(new_assignment, cost)
            return MigrationReport(app_id, component_id, source, target, mode, downtime, self.now + delay)

    def restore_component(self, cid: str, app_id: str, component_id: str, target: str) -> MigrationReport:
        """Restart a component that lost all its instances (e.g. after a segment failure)."""
        with self._lock:
            rec = self.deployment(cid, app_id)
            if any(i.consumes() for i in rec.instances.get(component_id, [])):
                raise MigrationInProgress(f"{app_id}/{component_id} still has live instances")
        return self.migrate_component(
            cid, app_id, component_id, target, MigrationMode.BREAK_BEFORE_MAKE, expand_quota=True
        )

    def scale_application(self, cid: str, app_id: str, delta: int, expand_quota: bool = False) -> int:
        """Change the replica count by ``delta`` (never below one); returns the new count."""
        with self._lock:
            self._require_active(cid)
            rec = self.deployment(cid, app_id)
            target = max(1, rec.replicas + delta)
            if target > rec.replicas:
                extra = target - rec.replicas
                need: dict[str, ResourceVector] = {}
                for comp in rec.app.components:
                    for inst in rec.instances.get(comp.id, []):
                        if inst.consumes():
                            need[inst.segment] = need.get(inst.segment, ZERO) + comp.demand * extra
                free = self.free_quota(cid)
                if not expand_quota:
                    for sid, amount in sorted(need.items()):
                        if not amount <= free.get(sid, ZERO):
                            raise Infeasible([("quota", f"{sid}: scale-up exceeds free quota")])
                shortfalls = {
                    sid: (amount - free.get(sid, ZERO)).clip() for sid, amount in sorted(need.items())
                }
                shortfalls = {sid: v for sid, v in shortfalls.items() if not v.is_zero()}
                report = self.broker.query_feasibility(
                    [(SegmentFilter.only(sid), v) for sid, v in shortfalls.items()]
                )
                if not report.feasible:
                    raise Infeasible(list(report.blocking))
                taken: list[str] = []
                try:
                    for sid, v in shortfalls.items():
                        taken.append(self.expand_quota(cid, sid, v))
                except (InsufficientCapacity, AgreementExceeded) as exc:
                    cont = self.continuum(cid)
                    for rid in taken:
                        self.broker.release(rid)
                        cont.quotas.remove(rid)
                    kind = "agreement" if isinstance(exc, AgreementExceeded) else "capacity"
                    raise Infeasible([(kind, str(exc))]) from exc
            rec.replicas = target
            return target

    def terminate_application(self, cid: str, app_id: str) -> None:
        with self._lock:
            cont = self.continuum(cid)
            rec = cont.deployed_apps.get(app_id)
            if rec is None:
                raise UnknownApplication(f"unknown application {app_id} in {cid}")
            self._stop_all(rec)
            del cont.deployed_apps[app_id]

    def update_requirements(self, cid: str, app_id: str, app: ApplicationDescriptor) -> None:
        with self._lock:
            rec = self.deployment(cid, app_id)
            rec.app = app

    def fail_segment(self, segment_id: str) -> list[tuple[str, str, str]]:
        """Drop every instance on a failed segment; returns the (continuum, app, component) hit."""
        hit = []
        with self._lock:
            for cont in self.continuums():
                for app_id, rec in sorted(cont.deployed_apps.items()):
                    for comp_id, insts in sorted(rec.instances.items()):
                        lost = [i for i in insts if i.segment == segment_id and i.consumes()]
                        if lost:
                            for inst in lost:
                                inst.state = InstanceState.STOPPED
                            rec.instances[comp_id] = [i for i in insts if i.consumes()]
                            hit.append((cont.id, app_id, comp_id))
        return hit

    def _stop_all(self, rec: DeploymentRecord) -> None:
        for insts in rec.instances.values():
            for inst in insts:
                inst.state = InstanceState.STOPPED

    # -- clock ------------------------------------------------------------------
    def advance(self, tick: int) -> list[tuple[str, str, str, str]]:
        """Move the clock to ``tick`` and progress migration windows.

        Returns ``(continuum, app, component, event)`` tuples for every
        instance transition that happened.
        """
        events = []
        with self._lock:
            self.now = tick
            for cont in self.continuums():
                for app_id, rec in sorted(cont.deployed_apps.items()):
                    for comp_id in sorted(rec.instances):
                        for ev in self._promote(rec, comp_id):
                            events.append((cont.id, app_id, comp_id, ev))
        return events

    def _promote(self, rec: DeploymentRecord, comp_id: str) -> list[str]:
        events = []
        insts = rec.instances[comp_id]
        for inst in insts:
            if inst.state is InstanceState.DRAINING and inst.stop_at is not None and inst.stop_at <= self.now:
                inst.state = InstanceState.STOPPED
                events.append(f"stopped {inst.segment}")
        for inst in insts:
            if inst.state is InstanceState.STARTING and inst.ready_at is not None and inst.ready_at <= self.now:
                inst.state = InstanceState.READY
                events.append(f"ready {inst.segment}")
                for old in insts:
                    if old is not inst and old.state is InstanceState.READY:
                        old.state = InstanceState.DRAINING
                        old.stop_at = self.now + 1
                        events.append(f"draining {old.segment}")
        rec.instances[comp_id] = [i for i in insts if i.consumes()]
        return events
