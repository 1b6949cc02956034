"""Tick-driven simulation over the full orchestration stack.

Each tick runs, in order: lifecycle clock, scheduled events, telemetry
synthesis from ground truth, twin ingest and snapshot, due loops,
coordination, actuation, and the closing KPI and inventory records.
"""

from __future__ import annotations

import json
import math
import random
import threading
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from aiora.broker import ResourceBroker
from aiora.coordinator import detect_conflicts, negotiate_quality_targets, resolve
from aiora.errors import AioraError, Infeasible, NoLadderDeclared, Unauthorized
from aiora.exposure import EdgeRegistry, authorize_operation
from aiora.lifecycle import (
    ContinuumState,
    DeploymentRecord,
    InstanceState,
    LifecycleManager,
)
from aiora.loops import (
    ActionKind,
    ActuationProposal,
    ComposedLoop,
    LoopContext,
    Registry,
    compose_loop,
    evaluate_loop,
)
from aiora.model import ResourceVector, user_latency
from aiora.sim.metrics import MetricsSummary, summarize
from aiora.sim.scenario import AppConfig, Event, EventKind, ScenarioConfig
from aiora.twin import (
    AppStructure,
    DigitalTwin,
    Inventory,
    TelemetryRecord,
    TwinSnapshot,
)


def _finite(x: float | None) -> float | None:
    return None if x is None or math.isinf(x) else x


@dataclass(frozen=True)
class TraceRecord:
    seq: int
    tick: int
    kind: str
    payload: Mapping[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {"seq": self.seq, "tick": self.tick, "kind": self.kind, "payload": self.payload}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_trace(trace: Iterable[TraceRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in trace:
            fh.write(rec.to_json())
            fh.write("\n")


@dataclass
class _AppState:
    config: AppConfig
    surge: float = 1.0
    negotiated: bool = False

    @property
    def continuum(self) -> str:
        return self.config.continuum


@dataclass
class _Timers:
    # tick -> (what, subject) pairs that end a timed event
    pending: dict[int, list[tuple[str, str]]] = field(default_factory=dict)

    def add(self, tick: int, what: str, subject: str) -> None:
        self.pending.setdefault(tick, []).append((what, subject))

    def due(self, tick: int) -> list[tuple[str, str]]:
        return self.pending.pop(tick, [])


class Engine:
    """Owns one broker, lifecycle manager, twin, loop set and edge registry."""

    def __init__(self, cfg: ScenarioConfig, registry: Registry | None = None) -> None:
        self.cfg = cfg
        self.topology = cfg.topology
        self.broker = ResourceBroker(self.topology.stakeholders)
        for seg in self.topology.segments:
            self.broker.register_segment(seg)
        self.lifecycle = LifecycleManager(self.topology, self.broker, cfg.startup_delay)
        self.twin = DigitalTwin(self.topology)
        self.registry = registry or Registry.builtin()
        self.edge = EdgeRegistry(self.topology, cfg.scenario, self.lifecycle.state_name)
        self.rng = random.Random(cfg.seed)
        self.trace: list[TraceRecord] = []
        self.loops: dict[str, ComposedLoop] = {}
        self.apps: dict[str, _AppState] = {}
        self.failed: set[str] = set()
        self.maintenance: set[str] = set()
        self.tick = 0
        self.lock = threading.RLock()
        self._timers = _Timers()
        self._last_snapshot: TwinSnapshot | None = None
        self._ready = False

    # -- trace ----------------------------------------------------------------
    def record(self, kind: str, payload: Mapping[str, Any], tick: int | None = None) -> None:
        self.trace.append(TraceRecord(len(self.trace), self.tick if tick is None else tick, kind, payload))

    def _error(self, stage: str, exc: Exception, **extra: Any) -> None:
        self.record("error", {"stage": stage, "error": type(exc).__name__, "message": str(exc), **extra})

    # -- setup ----------------------------------------------------------------
    def setup(self) -> None:
        with self.lock:
            if self._ready:
                return
            self._ready = True
            for req in self.cfg.continuums:
                try:
                    self.lifecycle.create_continuum(req)
                    self.lifecycle.transition(req.id, ContinuumState.INSTANTIATED)
                    self.lifecycle.transition(req.id, ContinuumState.ACTIVE)
                except AioraError as exc:
                    self._error("setup", exc, continuum=req.id)
                    continue
                self.record(
                    "lifecycle",
                    {"continuum": req.id, "state": "Active", "quota": _rv_map(self.lifecycle.quota(req.id))},
                )
            for acfg in self.cfg.applications:
                self.apps[acfg.app.id] = _AppState(acfg)
                self._deploy(acfg)
            for reg in self.cfg.registrations:
                try:
                    if reg.kind == "ees":
                        self.edge.register_ees(reg.actor, reg.parent, reg.id, reg.segment, reg.capabilities)
                    else:
                        self.edge.register_eas(reg.actor, reg.parent, reg.id, reg.segment, reg.capabilities, reg.app)
                except AioraError as exc:
                    self._error("setup", exc, registration=reg.id)
                    continue
                self.record("lifecycle", {"registered": reg.kind, "id": reg.id, "segment": reg.segment})
            self._compose_loops()

    def _compose_loops(self) -> None:
        scope = {f"app:{a}": s.continuum for a, s in self.apps.items()}
        scope.update({f"segment:{s.id}": None for s in self.topology.segments})
        scope.update({f"continuum:{c.id}": c.id for c in self.cfg.continuums})
        pending = sorted(self.cfg.loops, key=lambda s: s.id)
        while pending:
            progressed = False
            for spec in list(pending):
                if spec.parent is not None and spec.parent not in self.loops and any(
                    p.id == spec.parent for p in pending
                ):
                    continue
                pending.remove(spec)
                progressed = True
                try:
                    loop = compose_loop(spec, self.registry, self.loops, scope)
                except AioraError as exc:
                    self._error("setup", exc, loop=spec.id)
                    continue
                self.loops[spec.id] = loop
                if spec.scope in {c.id for c in self.cfg.continuums}:
                    try:
                        self.lifecycle.continuum(spec.scope).loops.append(spec.id)
                    except AioraError:
                        pass
                self.record("lifecycle", {"loop": spec.id, "depth": loop.depth, "composed": True})
            if not progressed:
                for spec in pending:
                    self.record("error", {"stage": "setup", "error": "CyclicNesting", "loop": spec.id})
                break

    def _available(self, cid: str) -> dict[str, ResourceVector]:
        return {
            sid: free
            for sid, free in self.lifecycle.free_quota(cid, online_only=True).items()
            if free.is_nonnegative()
        }

    def _deploy(self, acfg: AppConfig) -> DeploymentRecord | None:
        cid, app = acfg.continuum, acfg.app
        if acfg.actor is not None:
            decision = authorize_operation(
                acfg.actor, "deploy_application", self.cfg.scenario, self.topology.stakeholder_map
            )
            if not decision:
                self._error("deploy", Unauthorized(decision.reason), app=app.id)
                return None
        try:
            rec = self.lifecycle.deploy_application(cid, app, acfg.weights)
        except Infeasible as exc:
            self.record("negotiation", {"app": app.id, "trigger": "deploy", "blocking": exc.kinds})
            try:
                outcome = negotiate_quality_targets(
                    app, exc.kinds, acfg.ladder, self.topology, acfg.weights, self._available(cid)
                )
            except NoLadderDeclared as nexc:
                self._error("deploy", nexc, app=app.id)
                return None
            self.record("negotiation", {"app": app.id, "trigger": "deploy", **outcome.to_dict()})
            if not outcome.accepted or outcome.requirements is None:
                return None
            self.apps[app.id].negotiated = True
            try:
                rec = self.lifecycle.deploy_application(cid, app.with_requirements(outcome.requirements), acfg.weights)
            except AioraError as dexc:
                self._error("deploy", dexc, app=app.id)
                return None
        except AioraError as exc:
            self._error("deploy", exc, app=app.id)
            return None
        self.record(
            "lifecycle",
            {"app": app.id, "continuum": cid, "deployed": dict(rec.plan.assignment), "cost": rec.plan.cost.to_dict()},
        )
        return rec

    # -- ground truth -----------------------------------------------------------
    def deployments(self) -> list[tuple[str, DeploymentRecord]]:
        out = []
        for cont in self.lifecycle.continuums():
            for _, rec in sorted(cont.deployed_apps.items()):
                out.append((cont.id, rec))
        return out

    def _segment_cpu(self) -> dict[str, int]:
        used = {s.id: 0 for s in self.topology.segments}
        for _, rec in self.deployments():
            for comp in rec.app.components:
                for inst in rec.instances.get(comp.id, []):
                    if inst.consumes():
                        used[inst.segment] += comp.demand.cpu * rec.replicas
        return used

    def _app_truth(self, rec: DeploymentRecord) -> dict[str, Any]:
        zone = rec.app.requirements.user_zone
        ready = {c.id: rec.ready_count(c.id) for c in rec.app.components}
        latency: float | None = 0.0
        throughput: float | None = None
        for comp in rec.app.latency_components():
            segs = [i.segment for i in rec.instances.get(comp.id, []) if i.state is InstanceState.READY]
            if not segs:
                latency = None
                break
            best = min(user_latency(self.topology, zone, s) for s in segs)
            latency = max(latency, best) if latency is not None else None
            bw = max(self.topology.segment(s).capacity.bandwidth for s in segs)
            throughput = bw if throughput is None else min(throughput, bw)
        state = self.apps.get(rec.app_id)
        load = (state.config.load * state.surge) if state else 0.0
        return {
            "latency_ms": _finite(latency),
            "throughput_mbps": float(throughput or 0.0) if latency is not None else 0.0,
            "ready": ready,
            "ready_instances": min(ready.values(), default=0),
            "utilization": min(1.0, load / rec.replicas),
            "replicas": rec.replicas,
            "zone": zone,
        }

    def _noisy(self, value: float) -> float:
        if self.cfg.noise <= 0:
            return value
        return value * (1.0 + self.rng.uniform(-self.cfg.noise, self.cfg.noise))

    def synthesize(self, tick: int) -> list[TelemetryRecord]:
        out = []
        cpu = self._segment_cpu()
        for seg in sorted(self.topology.segments, key=lambda s: s.id):
            cap = seg.capacity.cpu
            util = cpu[seg.id] / cap if cap > 0 else 0.0
            if seg.id in self.failed:
                util = 0.0
            out.append(TelemetryRecord(tick, seg.id, "cpu_utilization", min(1.0, self._noisy(util)), "ratio"))
            out.append(TelemetryRecord(tick, seg.id, "online", 0.0 if seg.id in self.maintenance | self.failed else 1.0))
            out.append(TelemetryRecord(tick, seg.id, "failed", 1.0 if seg.id in self.failed else 0.0))
        for _, rec in self.deployments():
            truth = self._app_truth(rec)
            lat = truth["latency_ms"]
            out.append(TelemetryRecord(tick, rec.app_id, "latency_ms", -1.0 if lat is None else self._noisy(lat), "ms"))
            out.append(TelemetryRecord(tick, rec.app_id, "throughput_mbps", truth["throughput_mbps"], "Mbps"))
            out.append(TelemetryRecord(tick, rec.app_id, "ready_instances", float(truth["ready_instances"])))
            out.append(TelemetryRecord(tick, rec.app_id, "utilization", min(1.0, self._noisy(truth["utilization"])), "ratio"))
        return out

    def inventory(self) -> Inventory:
        free = {
            c.id: self.lifecycle.free_quota(c.id)
            for c in self.lifecycle.continuums()
            if c.state is not ContinuumState.TERMINATED
        }
        apps = {}
        for cid, rec in self.deployments():
            apps[rec.app_id] = AppStructure(
                continuum=cid,
                zone=rec.app.requirements.user_zone,
                replicas=rec.replicas,
                placement=dict(rec.plan.assignment),
                demands={c.id: c.demand for c in rec.app.components},
                latency_components=tuple(c.id for c in rec.app.latency_components()),
                migrating=any(rec.in_migration(c.id) for c in rec.app.components),
            )
        return Inventory(self.broker.residuals(), free, apps)

    def observe(self, tick: int) -> TwinSnapshot:
        """Synthesize telemetry for ``tick``, feed the twin and return its snapshot."""
        with self.lock:
            telemetry = self.synthesize(tick)
            self.twin.ingest(telemetry)
            self.twin.observe_inventory(self.inventory())
            snap = self.twin.snapshot(tick)
            self._last_snapshot = snap
            return snap

    def current_snapshot(self) -> TwinSnapshot:
        with self.lock:
            return self.observe(self.tick)

    # -- events -----------------------------------------------------------------
    def _apply_event(self, ev: Event) -> dict[str, Any]:
        p = ev.payload
        effects: dict[str, Any] = {}
        if ev.kind is EventKind.USER_MOBILITY:
            moved = []
            for cid, rec in self.deployments():
                zone = rec.app.requirements.user_zone
                if "app" in p and rec.app_id != p["app"]:
                    continue
                if "from" in p and zone != p["from"]:
                    continue
                moved_reqs = replace(rec.app.requirements, user_zone=p["to"])
                self.lifecycle.update_requirements(cid, rec.app_id, rec.app.with_requirements(moved_reqs))
                moved.append(rec.app_id)
            effects["moved"] = moved
        elif ev.kind is EventKind.MAINTENANCE_SHUTDOWN:
            seg = p["segment"]
            self.broker.set_online(seg, False)
            self.maintenance.add(seg)
            self._timers.add(ev.tick + int(p["duration"]), "maintenance_end", seg)
            effects["until"] = ev.tick + int(p["duration"])
        elif ev.kind is EventKind.LOAD_SURGE:
            state = self.apps[p["app"]]
            state.surge = float(p["factor"])
            if "duration" in p:
                self._timers.add(ev.tick + int(p["duration"]), "surge_end", p["app"])
        elif ev.kind is EventKind.SEGMENT_FAILURE:
            seg = p["segment"]
            self.broker.set_online(seg, False)
            self.failed.add(seg)
            effects["lost"] = [list(h) for h in self.lifecycle.fail_segment(seg)]
            if "duration" in p:
                self._timers.add(ev.tick + int(p["duration"]), "recovered", seg)
        return effects

    def _expire_timers(self, tick: int) -> None:
        for what, subject in self._timers.due(tick):
            if what == "maintenance_end":
                self.maintenance.discard(subject)
            elif what == "recovered":
                self.failed.discard(subject)
            elif what == "surge_end":
                self.apps[subject].surge = 1.0
            if what in ("maintenance_end", "recovered") and subject not in self.maintenance | self.failed:
                self.broker.set_online(subject, True)
            self.record("event", {"kind": what, "subject": subject})

    # -- actuation ----------------------------------------------------------------
    def _find(self, app_id: str | None) -> tuple[str, DeploymentRecord]:
        for cid, rec in self.deployments():
            if rec.app_id == app_id:
                return cid, rec
        raise Infeasible([("target", f"application {app_id} is not deployed")])

    def actuate(self, p: ActuationProposal) -> dict[str, Any]:
        kind = p.action.kind
        if kind is ActionKind.RECONFIGURE:
            cid = p.target.split(":", 1)[1] if p.target.startswith("continuum:") else p.continuum
            if cid is None:
                raise Infeasible([("target", f"{p.target} has no continuum")])
            self.lifecycle.modify_continuum(cid, config={p.action.key: p.action.value})
            return {"continuum": cid, "config": {p.action.key: p.action.value}}
        cid, rec = self._find(p.app_id)
        if kind in (ActionKind.SCALE_UP, ActionKind.SCALE_DOWN):
            delta = p.action.amount if kind is ActionKind.SCALE_UP else -p.action.amount
            replicas = self.lifecycle.scale_application(cid, rec.app_id, delta, expand_quota=True)
            return {"replicas": replicas}
        if kind is ActionKind.MIGRATE:
            comp = p.action.component
            target = p.action.segment
            live = [i for i in rec.instances.get(comp, []) if i.consumes()]
            if live:
                mode = self.apps[rec.app_id].config.migration_mode if rec.app_id in self.apps else None
                report = self.lifecycle.migrate_component(
                    cid, rec.app_id, comp, target, **({"mode": mode} if mode else {}), expand_quota=True
                )
            else:
                report = self.lifecycle.restore_component(cid, rec.app_id, comp, target)
            return report.to_dict()
        # NegotiateQuality
        state = self.apps.get(rec.app_id)
        if state is None or state.config.ladder is None:
            raise NoLadderDeclared(rec.app_id)
        if state.negotiated:
            raise Infeasible([("negotiation", f"{rec.app_id} already negotiated its ladder")])
        # walk the ladder from the declared requirements, at the users' current zone
        declared = replace(state.config.app.requirements, user_zone=rec.app.requirements.user_zone)
        base = rec.app.with_requirements(declared)
        available = self._available(cid)
        outcome = negotiate_quality_targets(base, ["latency"], state.config.ladder, self.topology, rec.weights, available)
        self.record("negotiation", {"app": rec.app_id, "trigger": p.id, **outcome.to_dict()})
        if not outcome.accepted or outcome.requirements is None:
            raise Infeasible([("negotiation", "ladder exhausted")])
        state.negotiated = True
        self.lifecycle.update_requirements(cid, rec.app_id, rec.app.with_requirements(outcome.requirements))
        return {"requirements": outcome.requirements.to_dict(), "rung": outcome.rung}

    # -- tick -----------------------------------------------------------------------
    def step(self, tick: int) -> TwinSnapshot:
        with self.lock:
            self.setup()
            self.tick = tick
            for cid, app_id, comp, what in self.lifecycle.advance(tick):
                self.record("lifecycle", {"continuum": cid, "app": app_id, "component": comp, "instance": what})
            self._expire_timers(tick)
            fired = []
            for ev in self.cfg.events:
                if ev.tick != tick:
                    continue
                try:
                    effects = self._apply_event(ev)
                except AioraError as exc:
                    self._error("event", exc, event=ev.to_dict())
                    continue
                fired.append(ev.kind.value)
                self.record("event", {**ev.to_dict(), "effects": effects})

            telemetry = self.synthesize(tick)
            self.twin.ingest(telemetry)
            self.record("telemetry", {"records": [_telemetry_row(r) for r in telemetry]})
            self.twin.observe_inventory(self.inventory())
            snap = self.twin.snapshot(tick)
            self._last_snapshot = snap
            self.record("snapshot", snap.to_dict())

            proposals = self._evaluate(snap, tick, fired)
            if proposals:
                report = detect_conflicts(proposals, snap, self.loops)
                decision = resolve(proposals, report, self.loops, snap)
                self.record("conflicts", {"conflicts": report.to_dict()})
                self.record("decision", decision.to_dict())
                by_id = {p.id: p for p in proposals}
                for pid in decision.accepted:
                    self._enact(by_id[pid], tick)

            self._close_tick(tick)
            return snap

    def _evaluate(self, snap: TwinSnapshot, tick: int, fired: list[str]) -> list[ActuationProposal]:
        ctx = LoopContext(self.topology, {rec.app_id: rec.app for _, rec in self.deployments()})
        proposals = []
        for loop_id in sorted(self.loops):
            loop = self.loops[loop_id]
            if not loop.due(tick, fired):
                continue
            try:
                outcome = evaluate_loop(loop, snap, tick, ctx)
            except AioraError as exc:
                self._error("loop", exc, loop=loop_id)
                continue
            if outcome.proposal is None:
                continue
            assert isinstance(outcome.proposal, ActuationProposal)
            proposals.append(outcome.proposal)
            self.record("proposal", {**outcome.proposal.to_dict(), "rationale": outcome.rationale})
        return proposals

    def _enact(self, p: ActuationProposal, tick: int) -> None:
        # an attempt starts the loop's cooldown whether or not it succeeds
        self.loops[p.loop_id].record_actuation(tick)
        try:
            result = self.actuate(p)
        except AioraError as exc:
            self.record(
                "actuation",
                {"proposal": p.id, "action": p.action.to_dict(), "target": p.target, "ok": False,
                 "error": type(exc).__name__, "message": str(exc)},
            )
            return
        self.record(
            "actuation",
            {"proposal": p.id, "action": p.action.to_dict(), "target": p.target, "ok": True, "result": result},
        )

    def _close_tick(self, tick: int) -> None:
        kpis = {}
        for cid, rec in self.deployments():
            truth = self._app_truth(rec)
            truth["continuum"] = cid
            truth["placement"] = dict(sorted(rec.plan.assignment.items()))
            kpis[rec.app_id] = truth
        self.record("kpi", {"apps": kpis})
        usage = self.broker.utilization_report()
        conserved = all(
            u.held + u.residual == u.capacity and u.residual.is_nonnegative() for u in usage.values()
        )
        agreements_ok = all(held <= limit for _, _, held, limit in self.broker.agreement_usage())
        self.record(
            "inventory",
            {
                "segments": {sid: u.to_dict() for sid, u in usage.items()},
                "conserved": conserved,
                "agreements_ok": agreements_ok,
            },
        )

    def run(self) -> tuple[list[TraceRecord], MetricsSummary]:
        self.setup()
        for tick in range(self.cfg.horizon):
            self.step(tick)
        return self.trace, summarize(self.trace, self.cfg.tick_seconds)


def _telemetry_row(r: TelemetryRecord) -> list[Any]:
    return [r.source, r.metric, r.value]


def _rv_map(m: Mapping[str, ResourceVector]) -> dict[str, dict[str, int]]:
    return {k: v.to_dict() for k, v in sorted(m.items())}


def run(cfg: ScenarioConfig) -> tuple[list[TraceRecord], MetricsSummary]:
    return Engine(cfg).run()

