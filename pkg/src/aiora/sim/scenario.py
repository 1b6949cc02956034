"""Scenario files: parsing and cross-reference validation."""

from __future__ import annotations

import json
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any

from aiora.errors import AioraError, ScenarioParseError, ScenarioValidationError
from aiora.exposure import BusinessScenario
from aiora.lifecycle import ContinuumRequest, MigrationMode
from aiora.loops import CROSS_SEGMENT, ClosedLoopSpec
from aiora.model import Topology, validate_topology
from aiora.placement import ApplicationDescriptor, ObjectiveWeights

_TOP_KEYS = {
    "topology", "scenario", "continuums", "applications", "loops", "events", "registrations",
    "horizon", "seed", "tick_seconds", "noise", "startup_delay",
}


class EventKind(str, Enum):
    USER_MOBILITY = "UserMobility"
    MAINTENANCE_SHUTDOWN = "MaintenanceShutdown"
    LOAD_SURGE = "LoadSurge"
    SEGMENT_FAILURE = "SegmentFailure"


@dataclass(frozen=True)
class Event:
    tick: int
    kind: EventKind
    payload: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"tick": self.tick, "kind": self.kind.value, **dict(self.payload)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Event:
        payload = {k: v for k, v in d.items() if k not in ("tick", "kind")}
        return cls(int(d["tick"]), EventKind(d["kind"]), payload)


@dataclass(frozen=True)
class AppConfig:
    continuum: str
    app: ApplicationDescriptor
    weights: ObjectiveWeights
    ladder: tuple[Mapping[str, Any], ...] | None = None
    # offered load as a fraction of one replica's capacity
    load: float = 0.5
    migration_mode: MigrationMode = MigrationMode.MAKE_BEFORE_BREAK
    actor: str | None = None

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> AppConfig:
        ladder = d.get("ladder")
        return cls(
            continuum=str(d["continuum"]),
            app=ApplicationDescriptor.from_dict(d["app"]),
            weights=ObjectiveWeights.from_dict(d.get("weights", {"w_latency": 1.0})),
            ladder=tuple(dict(r) for r in ladder) if ladder is not None else None,
            load=float(d.get("load", 0.5)),
            migration_mode=MigrationMode(d.get("migration_mode", MigrationMode.MAKE_BEFORE_BREAK.value)),
            actor=d.get("actor"),
        )


@dataclass(frozen=True)
class Registration:
    kind: str  # "ees" or "eas"
    actor: str
    id: str
    segment: str
    parent: str  # continuum for an EES, EES for an EAS
    capabilities: tuple[str, ...] = ()
    app: str | None = None

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Registration:
        kind = str(d["kind"])
        if kind not in ("ees", "eas"):
            raise ValueError(f"registration kind must be ees or eas, got {kind}")
        return cls(
            kind=kind,
            actor=str(d["actor"]),
            id=str(d["id"]),
            segment=str(d["segment"]),
            parent=str(d["continuum"] if kind == "ees" else d["ees"]),
            capabilities=tuple(d.get("capabilities", ())),
            app=d.get("app"),
        )


@dataclass(frozen=True)
class ScenarioConfig:
    topology: Topology
    scenario: BusinessScenario
    continuums: tuple[ContinuumRequest, ...]
    applications: tuple[AppConfig, ...]
    loops: tuple[ClosedLoopSpec, ...] = ()
    events: tuple[Event, ...] = ()
    registrations: tuple[Registration, ...] = ()
    horizon: int = 10
    seed: int = 0
    tick_seconds: float = 1.0
    noise: float = 0.0
    startup_delay: int = 2

    def with_overrides(self, **changes: Any) -> ScenarioConfig:
        return replace(self, **changes)


def parse_scenario(data: Mapping[str, Any], base_dir: Path | None = None) -> ScenarioConfig:
    """Build a config from decoded JSON; structural problems raise ScenarioParseError."""
    if not isinstance(data, Mapping):
        raise ScenarioParseError("scenario must be a JSON object")
    extra = set(data) - _TOP_KEYS
    if extra:
        raise ScenarioParseError(f"unknown scenario keys: {sorted(extra)}")
    try:
        raw_topo = data["topology"]
        if isinstance(raw_topo, str):
            topo = Topology.load((base_dir or Path(".")) / raw_topo)
        else:
            topo = Topology.from_dict(raw_topo)
        scenario = BusinessScenario.from_dict(data["scenario"])
        return ScenarioConfig(
            topology=topo,
            scenario=scenario,
            continuums=tuple(ContinuumRequest.from_dict(c, scenario) for c in data.get("continuums", [])),
            applications=tuple(AppConfig.from_dict(a) for a in data.get("applications", [])),
            loops=tuple(ClosedLoopSpec.from_dict(spec) for spec in data.get("loops", [])),
            events=tuple(Event.from_dict(e) for e in data.get("events", [])),
            registrations=tuple(Registration.from_dict(r) for r in data.get("registrations", [])),
            horizon=int(data.get("horizon", 10)),
            seed=int(data.get("seed", 0)),
            tick_seconds=float(data.get("tick_seconds", 1.0)),
            noise=float(data.get("noise", 0.0)),
            startup_delay=int(data.get("startup_delay", 2)),
        )
    except ScenarioParseError:
        raise
    except (AioraError, KeyError, ValueError, TypeError, AttributeError, OSError) as exc:
        raise ScenarioParseError(f"malformed scenario: {exc}") from exc


def _selector_problem(sel: str, segments: set[str], apps: set[str]) -> str | None:
    parts = sel.split(":", 2)
    if len(parts) != 3:
        return f"malformed monitor selector {sel}"
    kind, entity, _ = parts
    if kind == "segment" and entity not in segments:
        return f"monitor {sel}: unknown segment {entity}"
    if kind == "app" and entity not in apps:
        return f"monitor {sel}: unknown application {entity}"
    if kind not in ("segment", "app"):
        return f"monitor {sel}: unknown entity kind {kind}"
    return None


def validate_scenario(cfg: ScenarioConfig) -> list[str]:
    """Every cross-reference problem in the config; empty means valid."""
    problems = list(validate_topology(cfg.topology).violations)
    topo = cfg.topology
    segments = set(topo.segment_map)
    zones = set(topo.zones)
    problems += cfg.scenario.validate(topo.stakeholder_map)

    if cfg.horizon < 1:
        problems.append("horizon must be >= 1")
    if not -(2**63) <= cfg.seed < 2**64:
        problems.append("seed must fit in 64 bits")
    if not cfg.tick_seconds > 0:
        problems.append("tick_seconds must be positive")
    if not 0 <= cfg.noise < 1:
        problems.append("noise must be in [0, 1)")
    if cfg.startup_delay < 0:
        problems.append("startup_delay must be >= 0")

    cids = [c.id for c in cfg.continuums]
    for cid, n in sorted(Counter(cids).items()):
        if n > 1:
            problems.append(f"duplicate continuum id {cid}")
    for c in cfg.continuums:
        if c.provider not in topo.stakeholder_map:
            problems.append(f"continuum {c.id}: unknown provider {c.provider}")
        for seg, _ in c.quotas:
            if seg not in segments:
                problems.append(f"continuum {c.id}: unknown segment {seg}")

    app_ids = [a.app.id for a in cfg.applications]
    for aid, n in sorted(Counter(app_ids).items()):
        if n > 1:
            problems.append(f"duplicate application id {aid}")
    for aid in sorted(set(app_ids) & segments):
        problems.append(f"application id {aid} collides with a segment id")
    for a in cfg.applications:
        if a.continuum not in cids:
            problems.append(f"application {a.app.id}: unknown continuum {a.continuum}")
        if a.app.requirements.user_zone not in zones:
            problems.append(f"application {a.app.id}: unknown zone {a.app.requirements.user_zone}")
        if a.load < 0:
            problems.append(f"application {a.app.id}: load must be >= 0")

    apps = set(app_ids)
    entities = {f"app:{a}" for a in apps} | {f"segment:{s}" for s in segments} | {f"continuum:{c}" for c in cids}
    loop_ids = [spec.id for spec in cfg.loops]
    for lid, n in sorted(Counter(loop_ids).items()):
        if n > 1:
            problems.append(f"duplicate loop id {lid}")
    for spec in cfg.loops:
        if spec.scope != CROSS_SEGMENT and spec.scope not in cids:
            problems.append(f"loop {spec.id}: unknown scope {spec.scope}")
        for target in sorted(spec.targets):
            if target not in entities:
                problems.append(f"loop {spec.id}: unknown target {target}")
        for sel in spec.monitors:
            p = _selector_problem(sel, segments, apps)
            if p:
                problems.append(f"loop {spec.id}: {p}")
        if spec.parent is not None and spec.parent not in loop_ids:
            problems.append(f"loop {spec.id}: unknown parent {spec.parent}")

    for ev in cfg.events:
        where = f"event {ev.kind.value}@{ev.tick}"
        if not 0 <= ev.tick < cfg.horizon:
            problems.append(f"{where}: tick outside horizon")
        p = ev.payload
        if ev.kind in (EventKind.MAINTENANCE_SHUTDOWN, EventKind.SEGMENT_FAILURE):
            if p.get("segment") not in segments:
                problems.append(f"{where}: unknown segment {p.get('segment')}")
            if ev.kind is EventKind.MAINTENANCE_SHUTDOWN and not int(p.get("duration", 0)) >= 1:
                problems.append(f"{where}: duration must be >= 1")
        elif ev.kind is EventKind.LOAD_SURGE:
            if p.get("app") not in apps:
                problems.append(f"{where}: unknown application {p.get('app')}")
            if not float(p.get("factor", 0)) >= 1:
                problems.append(f"{where}: factor must be >= 1")
        elif ev.kind is EventKind.USER_MOBILITY:
            if p.get("to") not in zones:
                problems.append(f"{where}: unknown zone {p.get('to')}")
            if "from" in p and p["from"] not in zones:
                problems.append(f"{where}: unknown zone {p['from']}")
            if "app" in p and p["app"] not in apps:
                problems.append(f"{where}: unknown application {p['app']}")

    ees_ids = {r.id for r in cfg.registrations if r.kind == "ees"}
    for r in cfg.registrations:
        if r.segment not in segments:
            problems.append(f"registration {r.id}: unknown segment {r.segment}")
        if r.kind == "ees" and r.parent not in cids:
            problems.append(f"registration {r.id}: unknown continuum {r.parent}")
        if r.kind == "eas" and r.parent not in ees_ids:
            problems.append(f"registration {r.id}: unknown EES {r.parent}")
    return problems


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioParseError(f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(f"{path}: invalid JSON: {exc}") from exc
    cfg = parse_scenario(data, path.parent)
    problems = validate_scenario(cfg)
    if problems:
        raise ScenarioValidationError(problems)
    return cfg


def load_scenario_dict(data: Mapping[str, Any], base_dir: Path | None = None) -> ScenarioConfig:
    cfg = parse_scenario(data, base_dir)
    problems = validate_scenario(cfg)
    if problems:
        raise ScenarioValidationError(problems)
    return cfg


def bundled_scenarios() -> Sequence[str]:
    root = Path(__file__).resolve().parent.parent / "scenarios"
    return sorted(p.name for p in root.glob("*.json"))
