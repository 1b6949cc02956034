"""Closed-loop composition and evaluation.

A loop is monitor selectors -> analyzer -> policy -> proposed actuation.
Loops never actuate: ``evaluate_loop`` is side-effect free and its proposals
go to the coordinator. Policies are looked up by id in a registry, so a
learned policy can replace the rule-based builtins without engine changes.
"""

from __future__ import annotations

import statistics
from collections.abc import Callable, Collection, Mapping
from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Any, Protocol

from aiora.errors import (
    BadParams,
    CyclicNesting,
    ScopeViolation,
    UnknownAnalyzer,
    UnknownEntity,
    UnknownPolicy,
)
from aiora.model import UNREACHABLE, ZERO, ResourceVector, Topology, user_latency
from aiora.placement import ApplicationDescriptor, ObjectiveWeights, check_assignment
from aiora.twin import AppKPI, SegmentStatus, TwinSnapshot

CROSS_SEGMENT = "CrossSegment"


def app_entity(app_id: str) -> str:
    return f"app:{app_id}"


def entity_app(entity: str) -> str | None:
    return entity[4:] if entity.startswith("app:") else None


class ActionKind(str, Enum):
    SCALE_UP = "ScaleUp"
    SCALE_DOWN = "ScaleDown"
    MIGRATE = "Migrate"
    RECONFIGURE = "Reconfigure"
    NEGOTIATE_QUALITY = "NegotiateQuality"


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    amount: int = 0
    component: str | None = None
    segment: str | None = None
    source: str | None = None
    key: str | None = None
    value: Any = None
    relaxed: Mapping[str, Any] | None = None

    def __post_init__(self) -> None:
        if self.kind in (ActionKind.SCALE_UP, ActionKind.SCALE_DOWN) and not self.amount > 0:
            raise ValueError("scale actions need a positive amount")

    @classmethod
    def scale_up(cls, amount: int) -> Action:
        return cls(ActionKind.SCALE_UP, amount=amount)

    @classmethod
    def scale_down(cls, amount: int) -> Action:
        return cls(ActionKind.SCALE_DOWN, amount=amount)

    @classmethod
    def migrate(cls, component: str, to: str, source: str | None = None) -> Action:
        return cls(ActionKind.MIGRATE, component=component, segment=to, source=source)

    @classmethod
    def reconfigure(cls, key: str, value: Any) -> Action:
        return cls(ActionKind.RECONFIGURE, key=key, value=value)

    @classmethod
    def negotiate(cls, relaxed: Mapping[str, Any] | None = None) -> Action:
        return cls(ActionKind.NEGOTIATE_QUALITY, relaxed=MappingProxyType(dict(relaxed or {})))

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind.value}
        if self.amount:
            d["amount"] = self.amount
        for name in ("component", "segment", "source", "key", "value"):
            v = getattr(self, name)
            if v is not None:
                d[name] = v
        if self.relaxed is not None:
            d["relaxed"] = dict(self.relaxed)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Action:
        return cls(
            ActionKind(d["kind"]),
            amount=int(d.get("amount", 0)),
            component=d.get("component"),
            segment=d.get("segment"),
            source=d.get("source"),
            key=d.get("key"),
            value=d.get("value"),
            relaxed=MappingProxyType(dict(d["relaxed"])) if d.get("relaxed") is not None else None,
        )


@dataclass(frozen=True)
class ActuationProposal:
    id: str
    loop_id: str
    target: str
    action: Action
    priority: int = 0
    tick: int = 0
    continuum: str | None = None
    expected_effect: Mapping[str, float] = field(default_factory=dict)
    # extra resources the action needs, per segment
    demand: Mapping[str, ResourceVector] = field(default_factory=dict)

    @property
    def app_id(self) -> str | None:
        return entity_app(self.target)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "loop_id": self.loop_id,
            "target": self.target,
            "action": self.action.to_dict(),
            "priority": self.priority,
            "tick": self.tick,
            "continuum": self.continuum,
            "expected_effect": dict(sorted(self.expected_effect.items())),
            "demand": {k: v.to_dict() for k, v in sorted(self.demand.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ActuationProposal:
        return cls(
            id=d["id"],
            loop_id=d["loop_id"],
            target=d["target"],
            action=Action.from_dict(d["action"]),
            priority=d.get("priority", 0),
            tick=d.get("tick", 0),
            continuum=d.get("continuum"),
            expected_effect=MappingProxyType(dict(d.get("expected_effect", {}))),
            demand=MappingProxyType({k: ResourceVector.from_dict(v) for k, v in d.get("demand", {}).items()}),
        )


@dataclass(frozen=True)
class ProposalDraft:
    """What a policy wants; the engine stamps id, loop, priority and tick."""

    target: str
    action: Action
    expected_effect: Mapping[str, float] = field(default_factory=dict)
    demand: Mapping[str, ResourceVector] = field(default_factory=dict)
    continuum: str | None = None


@dataclass(frozen=True)
class PolicyOutcome:
    proposal: ActuationProposal | ProposalDraft | None
    rationale: str


class TriggerKind(str, Enum):
    PERIODIC = "Periodic"
    ON_EVENT = "OnEvent"


@dataclass(frozen=True)
class Trigger:
    kind: TriggerKind = TriggerKind.PERIODIC
    every: int = 1
    event: str | None = None

    def fires(self, tick: int, events: Collection[str] = ()) -> bool:
        if self.kind is TriggerKind.PERIODIC:
            return tick % self.every == 0
        return self.event in events

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Trigger:
        if "every" in d:
            return cls(TriggerKind.PERIODIC, every=int(d["every"]))
        return cls(TriggerKind.ON_EVENT, event=str(d["on_event"]))

    def to_dict(self) -> dict[str, Any]:
        if self.kind is TriggerKind.PERIODIC:
            return {"every": self.every}
        return {"on_event": self.event}


@dataclass(frozen=True)
class ClosedLoopSpec:
    id: str
    scope: str
    monitors: tuple[str, ...]
    analyzer: str
    policy: str
    targets: frozenset[str]
    params: Mapping[str, Any] = field(default_factory=dict)
    trigger: Trigger = Trigger()
    parent: str | None = None
    priority: int = 0

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ClosedLoopSpec:
        return cls(
            id=str(d["id"]),
            scope=str(d.get("scope", CROSS_SEGMENT)),
            monitors=tuple(d.get("monitors", ())),
            analyzer=str(d.get("analyzer", "identity")),
            policy=str(d["policy"]),
            targets=frozenset(d["targets"]),
            params=MappingProxyType(dict(d.get("params", {}))),
            trigger=Trigger.from_dict(d.get("trigger", {"every": 1})),
            parent=d.get("parent"),
            priority=int(d.get("priority", 0)),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "scope": self.scope,
            "monitors": list(self.monitors),
            "analyzer": self.analyzer,
            "policy": self.policy,
            "targets": sorted(self.targets),
            "params": dict(self.params),
            "trigger": self.trigger.to_dict(),
            "parent": self.parent,
            "priority": self.priority,
        }


@dataclass(frozen=True)
class LoopContext:
    """Read-only knowledge a policy may consult besides the snapshot."""

    topology: Topology
    apps: Mapping[str, ApplicationDescriptor] = field(default_factory=dict)


Analyzer = Callable[[Mapping[str, float]], Mapping[str, float]]


class Policy(Protocol):
    def __call__(
        self,
        spec: ClosedLoopSpec,
        analysis: Mapping[str, float],
        snap: TwinSnapshot,
        ctx: LoopContext,
        tick: int,
        last_action_tick: int | None,
    ) -> PolicyOutcome: ...


# -- builtin analyzers ----------------------------------------------------------
def _identity(metrics: Mapping[str, float]) -> Mapping[str, float]:
    return dict(metrics)


def _max(metrics: Mapping[str, float]) -> Mapping[str, float]:
    return {"value": max(metrics.values(), default=0.0)}


def _mean(metrics: Mapping[str, float]) -> Mapping[str, float]:
    return {"value": statistics.fmean(metrics.values()) if metrics else 0.0}


# -- builtin policies ---------------------------------------------------------------
def _threshold_params(params: Mapping[str, Any]) -> tuple[float, float, int, int]:
    try:
        hi, lo = float(params["hi"]), float(params["lo"])
        step = int(params.get("step", 1))
        cooldown = int(params.get("cooldown", 0))
    except (KeyError, TypeError, ValueError) as exc:
        raise BadParams(f"threshold policy needs hi, lo, step: {exc}") from exc
    if not 0.0 <= lo < hi <= 1.0:
        raise BadParams(f"need 0 <= lo < hi <= 1, got lo={lo}, hi={hi}")
    if step < 1 or cooldown < 0:
        raise BadParams("step must be >= 1 and cooldown >= 0")
    return hi, lo, step, cooldown


def builtin_threshold_scale_policy(
    params: Mapping[str, Any],
    utilization: float,
    tick: int = 0,
    last_action_tick: int | None = None,
    replicas: int | None = None,
) -> PolicyOutcome:
    """Scale up above ``hi``, down below ``lo``; silent for ``cooldown`` ticks after acting.

    ``replicas`` bounds scale-down so at least one instance-equivalent remains.
    The draft's target is left empty for the caller to fill.
    """
    hi, lo, step, cooldown = _threshold_params(params)
    if last_action_tick is not None and tick - last_action_tick < cooldown:
        return PolicyOutcome(None, f"cooldown until tick {last_action_tick + cooldown}")
    if utilization > hi:
        return PolicyOutcome(
            ProposalDraft("", Action.scale_up(step), {"utilization": utilization * (1 - step / (step + (replicas or 1)))}),
            f"utilization {utilization:g} > {hi:g}",
        )
    if utilization < lo:
        room = step if replicas is None else min(step, replicas - 1)
        if room < 1:
            return PolicyOutcome(None, "already at one instance-equivalent")
        return PolicyOutcome(ProposalDraft("", Action.scale_down(room)), f"utilization {utilization:g} < {lo:g}")
    return PolicyOutcome(None, f"utilization {utilization:g} within [{lo:g}, {hi:g}]")


def _pick_value(spec: ClosedLoopSpec, analysis: Mapping[str, float]) -> float:
    key = spec.params.get("metric")
    if key is not None:
        return analysis[key]
    if "value" in analysis:
        return analysis["value"]
    if spec.monitors and spec.monitors[0] in analysis:
        return analysis[spec.monitors[0]]
    raise BadParams(f"loop {spec.id}: analysis has no usable value")


def _threshold_policy(
    spec: ClosedLoopSpec,
    analysis: Mapping[str, float],
    snap: TwinSnapshot,
    ctx: LoopContext,
    tick: int,
    last_action_tick: int | None,
) -> PolicyOutcome:
    value = _pick_value(spec, analysis)
    target = sorted(spec.targets)[0]
    app_id = entity_app(target)
    kpi = snap.apps.get(app_id) if app_id else None
    replicas = kpi.replicas if kpi is not None else None
    out = builtin_threshold_scale_policy(spec.params, value, tick, last_action_tick, replicas)
    draft = out.proposal
    if not isinstance(draft, ProposalDraft):
        return out
    demand: dict[str, ResourceVector] = {}
    if kpi is not None and draft.action.kind is ActionKind.SCALE_UP:
        for comp, seg in sorted(kpi.placement.items()):
            demand[seg] = demand.get(seg, ZERO) + kpi.demands.get(comp, ZERO) * draft.action.amount
        free = snap.free_quota.get(kpi.continuum, {})
        short = [
            seg for seg, need in sorted(demand.items())
            if not need <= free.get(seg, ZERO).clip() + snap.residuals.get(seg, ZERO)
        ]
        if short:
            return PolicyOutcome(None, f"{out.rationale}; no room on {', '.join(short)}")
    return PolicyOutcome(
        ProposalDraft(target, draft.action, draft.expected_effect, demand, kpi.continuum if kpi else None),
        out.rationale,
    )


_VIOLATION_ONLY = ObjectiveWeights(w_latency=1.0)


def builtin_latency_migration_policy(
    params: Mapping[str, Any],
    kpi: AppKPI,
    app: ApplicationDescriptor,
    topology: Topology,
    snap: TwinSnapshot,
) -> PolicyOutcome:
    """Move the worst-latency component when the measured latency breaks ``bound``.

    A destination is feasible when it is online, the continuum's free quota
    there covers the component, and the move adds no hard constraint
    violation. The pick is the feasible segment with the lowest model
    latency, strictly below the component's current one (ties by segment
    id). A component on an offline segment is evacuated to the best
    feasible segment regardless of latency. With no feasible destination
    the policy asks for a quality negotiation instead.
    """
    try:
        bound = float(params["bound"])
    except (KeyError, TypeError, ValueError) as exc:
        raise BadParams(f"latency policy needs a numeric bound: {exc}") from exc
    if not bound > 0:
        raise BadParams("bound must be positive")
    if kpi.migrating:
        return PolicyOutcome(None, "migration already in progress")

    placement = dict(kpi.placement)
    evacuate = sorted(c for c, s in placement.items() if snap.status.get(s, SegmentStatus.ONLINE) is not SegmentStatus.ONLINE)
    comp_latency = {c: user_latency(topology, kpi.zone, placement[c]) for c in kpi.latency_components}
    if evacuate:
        comp = evacuate[0]
        ceiling = UNREACHABLE
        reason = f"{comp} sits on offline segment {placement[comp]}"
    else:
        if kpi.latency_ms is None or kpi.latency_ms <= bound:
            return PolicyOutcome(None, f"latency {kpi.latency_ms} within bound {bound:g}")
        if not comp_latency:
            return PolicyOutcome(None, "no latency-bearing component")
        comp = max(sorted(comp_latency), key=lambda c: comp_latency[c])
        ceiling = comp_latency[comp]
        reason = f"latency {kpi.latency_ms:g} ms > bound {bound:g} ms"

    need = kpi.demands.get(comp, ZERO) * kpi.replicas
    free = snap.free_quota.get(kpi.continuum, {})
    scaled = app.scaled(kpi.replicas)
    _, before = check_assignment(topology, scaled, placement, _VIOLATION_ONLY)
    best: tuple[float, str] | None = None
    for seg in sorted(s.id for s in topology.segments):
        if seg == placement[comp] or snap.status.get(seg, SegmentStatus.ONLINE) is not SegmentStatus.ONLINE:
            continue
        if not need <= free.get(seg, ZERO):
            continue
        lat = user_latency(topology, kpi.zone, seg)
        if not lat < ceiling:
            continue
        trial = dict(placement)
        trial[comp] = seg
        _, after = check_assignment(topology, scaled, trial, _VIOLATION_ONLY)
        if any(v[0] != "capacity" and v not in before for v in after):
            continue
        if best is None or (lat, seg) < best:
            best = (lat, seg)

    target = app_entity(app.id)
    if best is None:
        relaxed = {"max_latency": kpi.latency_ms} if kpi.latency_ms is not None else {}
        return PolicyOutcome(
            ProposalDraft(target, Action.negotiate(relaxed), continuum=kpi.continuum),
            f"{reason}; no feasible destination",
        )
    lat, seg = best
    new_placement = dict(placement)
    new_placement[comp] = seg
    predicted = max((user_latency(topology, kpi.zone, new_placement[c]) for c in kpi.latency_components), default=0.0)
    return PolicyOutcome(
        ProposalDraft(
            target,
            Action.migrate(comp, seg, placement[comp]),
            {"latency_ms": predicted},
            {seg: need},
            kpi.continuum,
        ),
        f"{reason}; move {comp} to {seg} ({lat:g} ms)",
    )


def _latency_policy(
    spec: ClosedLoopSpec,
    analysis: Mapping[str, float],
    snap: TwinSnapshot,
    ctx: LoopContext,
    tick: int,
    last_action_tick: int | None,
) -> PolicyOutcome:
    cooldown = int(spec.params.get("cooldown", 0))
    if last_action_tick is not None and tick - last_action_tick < cooldown:
        return PolicyOutcome(None, "cooldown")
    notes = []
    for target in sorted(spec.targets):
        app_id = entity_app(target)
        if app_id is None or app_id not in snap.apps or app_id not in ctx.apps:
            notes.append(f"{target}: not deployed")
            continue
        out = builtin_latency_migration_policy(spec.params, snap.apps[app_id], ctx.apps[app_id], ctx.topology, snap)
        if out.proposal is not None:
            return out
        notes.append(f"{target}: {out.rationale}")
    return PolicyOutcome(None, "; ".join(notes) or "no targets")


def _validate_latency(params: Mapping[str, Any]) -> None:
    try:
        bound = float(params["bound"])
    except (KeyError, TypeError, ValueError) as exc:
        raise BadParams(f"latency policy needs a numeric bound: {exc}") from exc
    if not bound > 0:
        raise BadParams("bound must be positive")


@dataclass
class Registry:
    """Analyzer and policy ids available to loop specs, with parameter validators."""

    analyzers: dict[str, Analyzer] = field(default_factory=dict)
    policies: dict[str, Policy] = field(default_factory=dict)
    validators: dict[str, Callable[[Mapping[str, Any]], None]] = field(default_factory=dict)

    def register_analyzer(self, name: str, fn: Analyzer) -> None:
        self.analyzers[name] = fn

    def register_policy(
        self, name: str, fn: Policy, validate: Callable[[Mapping[str, Any]], None] | None = None
    ) -> None:
        self.policies[name] = fn
        if validate is not None:
            self.validators[name] = validate

    @classmethod
    def builtin(cls) -> Registry:
        reg = cls()
        reg.register_analyzer("identity", _identity)
        reg.register_analyzer("max", _max)
        reg.register_analyzer("mean", _mean)
        reg.register_policy("threshold_scale", _threshold_policy, lambda p: (_threshold_params(p), None)[1])
        reg.register_policy("latency_migration", _latency_policy, _validate_latency)
        return reg


# Parameter schemas of the builtin policies, for documentation and the CLI.
BUILTIN_POLICY_SCHEMAS: Mapping[str, Mapping[str, str]] = MappingProxyType(
    {
        "threshold_scale": {
            "hi": "float in (lo, 1]: scale up strictly above",
            "lo": "float in [0, hi): scale down strictly below",
            "step": "int >= 1: replicas added or removed per action",
            "cooldown": "int >= 0: ticks of silence after an actuation (default 0)",
            "metric": "optional analysis key to compare against the thresholds",
        },
        "latency_migration": {
            "bound": "float > 0: zone-to-EAS latency bound in ms",
            "cooldown": "int >= 0: ticks of silence after an actuation (default 0)",
        },
    }
)


@dataclass
class ComposedLoop:
    spec: ClosedLoopSpec
    analyzer: Analyzer
    policy: Policy
    depth: int
    last_action_tick: int | None = None

    @property
    def id(self) -> str:
        return self.spec.id

    def due(self, tick: int, events: Collection[str] = ()) -> bool:
        return self.spec.trigger.fires(tick, events)

    def record_actuation(self, tick: int) -> None:
        self.last_action_tick = tick


def compose_loop(
    spec: ClosedLoopSpec,
    registry: Registry,
    existing: Mapping[str, ComposedLoop] | None = None,
    entity_scope: Mapping[str, str | None] | None = None,
) -> ComposedLoop:
    """Validate a spec into an executable loop.

    ``existing`` holds already composed loops (parents must be among them).
    ``entity_scope`` maps managed-entity ids to their continuum; when given,
    every target must be known and, for a continuum-scoped loop, belong to it.
    """
    existing = existing or {}
    if not spec.targets:
        raise BadParams(f"loop {spec.id}: targets must be non-empty")
    if spec.trigger.kind is TriggerKind.PERIODIC and spec.trigger.every < 1:
        raise BadParams(f"loop {spec.id}: period must be >= 1")
    if spec.analyzer not in registry.analyzers:
        raise UnknownAnalyzer(spec.analyzer)
    if spec.policy not in registry.policies:
        raise UnknownPolicy(spec.policy)
    validate = registry.validators.get(spec.policy)
    if validate is not None:
        validate(spec.params)

    depth = 1
    parent = spec.parent
    seen = {spec.id}
    while parent is not None:
        if parent in seen:
            raise CyclicNesting(f"loop {spec.id}: nesting cycle through {parent}")
        if parent not in existing:
            raise CyclicNesting(f"loop {spec.id}: parent {parent} is not composed")
        seen.add(parent)
        depth += 1
        parent = existing[parent].spec.parent

    if entity_scope is not None:
        for target in sorted(spec.targets):
            if target not in entity_scope:
                raise UnknownEntity(f"loop {spec.id}: unknown target {target}")
            if spec.scope != CROSS_SEGMENT and entity_scope[target] != spec.scope:
                raise ScopeViolation(f"loop {spec.id} scoped to {spec.scope} targets {target}")
    return ComposedLoop(spec, registry.analyzers[spec.analyzer], registry.policies[spec.policy], depth)


def evaluate_loop(
    loop: ComposedLoop, snap: TwinSnapshot, tick: int, ctx: LoopContext
) -> PolicyOutcome:
    """Run one loop against one snapshot. Pure; raises MissingMetric for absent selectors."""
    metrics = {sel: snap.metric(sel) for sel in loop.spec.monitors}
    analysis = loop.analyzer(metrics)
    out = loop.policy(loop.spec, analysis, snap, ctx, tick, loop.last_action_tick)
    draft = out.proposal
    if draft is None or isinstance(draft, ActuationProposal):
        return out
    if draft.target not in loop.spec.targets:
        return PolicyOutcome(None, f"dropped proposal for {draft.target}: outside loop targets")
    proposal = ActuationProposal(
        id=f"{loop.spec.id}@{tick}",
        loop_id=loop.spec.id,
        target=draft.target,
        action=draft.action,
        priority=loop.spec.priority,
        tick=tick,
        continuum=draft.continuum,
        expected_effect=MappingProxyType(dict(draft.expected_effect)),
        demand=MappingProxyType(dict(draft.demand)),
    )
    return PolicyOutcome(proposal, out.rationale)
