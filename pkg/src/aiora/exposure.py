"""Edge enablement and exposure: EES/EAS/ECS registry plus scenario authorization.

The three business scenarios are encoded as a role matrix: for every system
entity class, which stakeholder offers it and which one manages it. Offer
rights gate create/offer operations; manage rights gate lifecycle,
registration and actuation.
"""

from __future__ import annotations

import math
import threading
from collections.abc import Callable, Collection, Mapping
from dataclasses import dataclass, field, replace
from enum import Enum
from types import MappingProxyType
from typing import Any

from aiora.errors import (
    AioraError,
    ContinuumNotActive,
    Unauthorized,
    UnknownContinuum,
    UnknownEES,
    UnknownZone,
)
from aiora.model import (
    UNREACHABLE,
    StakeholderDescriptor,
    StakeholderRole,
    Topology,
    path_latency,
    user_latency,
)


class EntityClass(str, Enum):
    VIRTUAL_INFRASTRUCTURE = "VirtualInfrastructure"
    CONTINUUM = "Continuum"
    APPLICATION_SERVER = "ApplicationServer"


class OperationKind(str, Enum):
    OFFER = "Offer"
    MANAGE = "Manage"


class ScenarioVariant(str, Enum):
    A = "A"
    B = "B"
    C = "C"


# Northbound operations and the (kind, entity class) right each one needs.
OPERATIONS: Mapping[str, tuple[OperationKind, EntityClass]] = MappingProxyType(
    {
        "offer_infrastructure": (OperationKind.OFFER, EntityClass.VIRTUAL_INFRASTRUCTURE),
        "manage_infrastructure": (OperationKind.MANAGE, EntityClass.VIRTUAL_INFRASTRUCTURE),
        "register_ecs": (OperationKind.MANAGE, EntityClass.VIRTUAL_INFRASTRUCTURE),
        "create_continuum": (OperationKind.OFFER, EntityClass.CONTINUUM),
        "transition_continuum": (OperationKind.MANAGE, EntityClass.CONTINUUM),
        "register_ees": (OperationKind.MANAGE, EntityClass.CONTINUUM),
        "deploy_application": (OperationKind.OFFER, EntityClass.APPLICATION_SERVER),
        "register_eas": (OperationKind.MANAGE, EntityClass.APPLICATION_SERVER),
        "actuate_application": (OperationKind.MANAGE, EntityClass.APPLICATION_SERVER),
    }
)


@dataclass(frozen=True)
class RoleAssignment:
    offering: str
    managing: str


@dataclass(frozen=True)
class BusinessScenario:
    variant: ScenarioVariant
    roles: Mapping[EntityClass, RoleAssignment]
    # the stakeholder ids the scenario was built from, by position name
    parties: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "roles", MappingProxyType(dict(self.roles)))
        object.__setattr__(self, "parties", MappingProxyType(dict(self.parties)))

    @classmethod
    def a(cls, operator: str) -> BusinessScenario:
        same = RoleAssignment(operator, operator)
        return cls(ScenarioVariant.A, {e: same for e in EntityClass}, {"operator": operator})

    @classmethod
    def b(cls, operator: str, app_provider: str) -> BusinessScenario:
        return cls(
            ScenarioVariant.B,
            {
                EntityClass.VIRTUAL_INFRASTRUCTURE: RoleAssignment(operator, operator),
                EntityClass.CONTINUUM: RoleAssignment(operator, operator),
                EntityClass.APPLICATION_SERVER: RoleAssignment(app_provider, operator),
            },
            {"operator": operator, "app_provider": app_provider},
        )

    @classmethod
    def c(cls, mno: str, edge_provider: str, app_provider: str) -> BusinessScenario:
        return cls(
            ScenarioVariant.C,
            {
                EntityClass.VIRTUAL_INFRASTRUCTURE: RoleAssignment(mno, mno),
                EntityClass.CONTINUUM: RoleAssignment(edge_provider, edge_provider),
                EntityClass.APPLICATION_SERVER: RoleAssignment(app_provider, edge_provider),
            },
            {"mno": mno, "edge_provider": edge_provider, "app_provider": app_provider},
        )

    def stakeholders(self) -> set[str]:
        return {p for r in self.roles.values() for p in (r.offering, r.managing)}

    def validate(self, stakeholders: Mapping[str, StakeholderDescriptor]) -> list[str]:
        """Check each party exists and holds a role its position allows."""
        allowed = {
            ScenarioVariant.A: {"operator": {StakeholderRole.MNO, StakeholderRole.APP_PROVIDER}},
            ScenarioVariant.B: {
                "operator": {StakeholderRole.MNO, StakeholderRole.EDGE_PROVIDER},
                "app_provider": {StakeholderRole.APP_PROVIDER},
            },
            ScenarioVariant.C: {
                "mno": {StakeholderRole.MNO},
                "edge_provider": {StakeholderRole.EDGE_PROVIDER},
                "app_provider": {StakeholderRole.APP_PROVIDER},
            },
        }[self.variant]
        problems = []
        for position, roles in allowed.items():
            sid = self.parties.get(position)
            if sid is None:
                problems.append(f"scenario {self.variant.value}: missing {position}")
            elif sid not in stakeholders:
                problems.append(f"scenario {self.variant.value}: unknown stakeholder {sid}")
            elif stakeholders[sid].role not in roles:
                problems.append(
                    f"scenario {self.variant.value}: {position} {sid} has role {stakeholders[sid].role.value}"
                )
        return problems

    def to_dict(self) -> dict[str, Any]:
        return {"variant": self.variant.value, **dict(self.parties)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> BusinessScenario:
        variant = ScenarioVariant(d["variant"])
        if variant is ScenarioVariant.A:
            return cls.a(str(d["operator"]))
        if variant is ScenarioVariant.B:
            return cls.b(str(d["operator"]), str(d["app_provider"]))
        return cls.c(str(d["mno"]), str(d["edge_provider"]), str(d["app_provider"]))


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.allowed


ALLOW = Decision(True)


def authorize(
    actor: str,
    operation: OperationKind,
    entity: EntityClass,
    scenario: BusinessScenario,
    known: Collection[str] | None = None,
) -> Decision:
    """Pure lookup in the scenario's role matrix.

    ``known`` is the set of registered stakeholder ids; without it, only the
    scenario's own parties count as known.
    """
    registered = scenario.stakeholders() if known is None else set(known)
    if actor not in registered:
        return Decision(False, "unknown stakeholder")
    roles = scenario.roles[EntityClass(entity)]
    if OperationKind(operation) is OperationKind.OFFER:
        holder, verb = roles.offering, "offers"
    else:
        holder, verb = roles.managing, "manages"
    if actor == holder:
        return ALLOW
    return Decision(
        False,
        f"{actor} may not {operation.value.lower()} {entity.value} under scenario "
        f"{scenario.variant.value}: {holder} {verb} it",
    )


def authorize_operation(
    actor: str, op_name: str, scenario: BusinessScenario, known: Collection[str] | None = None
) -> Decision:
    kind, entity = OPERATIONS[op_name]
    return authorize(actor, kind, entity, scenario, known)


class RegistrationState(str, Enum):
    REGISTERED = "Registered"
    DEREGISTERED = "Deregistered"


@dataclass(frozen=True)
class EESRecord:
    id: str
    continuum_id: str
    segment_id: str
    capabilities: frozenset[str] = frozenset()
    state: RegistrationState = RegistrationState.REGISTERED

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "continuum_id": self.continuum_id,
            "segment_id": self.segment_id,
            "capabilities": sorted(self.capabilities),
            "state": self.state.value,
        }


@dataclass(frozen=True)
class EASRecord:
    id: str
    ees_id: str
    segment_id: str
    capabilities: frozenset[str] = frozenset()
    app_id: str | None = None
    state: RegistrationState = RegistrationState.REGISTERED

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "ees_id": self.ees_id,
            "segment_id": self.segment_id,
            "capabilities": sorted(self.capabilities),
            "app_id": self.app_id,
            "state": self.state.value,
        }


@dataclass(frozen=True)
class ECSRecord:
    id: str
    scope: str = "VirtualInfrastructure"
    state: RegistrationState = RegistrationState.REGISTERED


@dataclass(frozen=True)
class EESCandidate:
    ees_id: str
    segment_id: str
    latency_ms: float


def _json_ms(ms: float) -> float | None:
    return ms if math.isfinite(ms) else None


@dataclass(frozen=True)
class ECSConfiguration:
    zone: str
    candidates: tuple[EESCandidate, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "zone": self.zone,
            "candidates": [
                {"ees_id": c.ees_id, "segment_id": c.segment_id, "latency_ms": _json_ms(c.latency_ms)}
                for c in self.candidates
            ],
        }


@dataclass(frozen=True)
class DiscoveryFilter:
    capabilities: frozenset[str] = frozenset()
    max_latency_ms: float | None = None
    # measure latency from this zone instead of from the EES segment
    zone: str | None = None


class DuplicateRecord(AioraError):
    pass


class EdgeRegistry:
    """EES/EAS/ECS registrations gated by the business scenario.

    ``continuum_state`` maps a continuum id to its lifecycle state name
    (``None`` for unknown continuums), decoupling the registry from the
    lifecycle manager.
    """

    def __init__(
        self,
        topology: Topology,
        scenario: BusinessScenario,
        continuum_state: Callable[[str], str | None],
        known_stakeholders: Collection[str] | None = None,
    ) -> None:
        self.topology = topology
        self.scenario = scenario
        self._continuum_state = continuum_state
        self._known = (
            set(known_stakeholders) if known_stakeholders is not None else set(topology.stakeholder_map)
        )
        self._lock = threading.RLock()
        self._ees: dict[str, EESRecord] = {}
        self._eas: dict[str, EASRecord] = {}
        self._ecs: dict[str, ECSRecord] = {}

    def _require(self, actor: str, op_name: str) -> None:
        decision = authorize_operation(actor, op_name, self.scenario, self._known)
        if not decision:
            raise Unauthorized(decision.reason)

    def register_ees(
        self, actor: str, continuum_id: str, ees_id: str, segment_id: str, capabilities: Collection[str] = ()
    ) -> EESRecord:
        with self._lock:
            self._require(actor, "register_ees")
            state = self._continuum_state(continuum_id)
            if state is None:
                raise UnknownContinuum(f"unknown continuum {continuum_id}")
            if state != "Active":
                raise ContinuumNotActive(f"continuum {continuum_id} is {state}")
            self.topology.segment(segment_id)
            if ees_id in self._ees and self._ees[ees_id].state is RegistrationState.REGISTERED:
                raise DuplicateRecord(f"EES {ees_id} already registered")
            rec = EESRecord(ees_id, continuum_id, segment_id, frozenset(capabilities))
            self._ees[ees_id] = rec
            return rec

    def register_eas(
        self,
        actor: str,
        ees_id: str,
        eas_id: str,
        segment_id: str,
        capabilities: Collection[str] = (),
        app_id: str | None = None,
    ) -> EASRecord:
        with self._lock:
            ees = self._ees.get(ees_id)
            if ees is None or ees.state is not RegistrationState.REGISTERED:
                raise UnknownEES(f"unknown EES {ees_id}")
            self._require(actor, "register_eas")
            self.topology.segment(segment_id)
            if eas_id in self._eas and self._eas[eas_id].state is RegistrationState.REGISTERED:
                raise DuplicateRecord(f"EAS {eas_id} already registered")
            rec = EASRecord(eas_id, ees_id, segment_id, frozenset(capabilities), app_id)
            self._eas[eas_id] = rec
            return rec

    def register_ecs(self, actor: str, ecs_id: str) -> ECSRecord:
        with self._lock:
            self._require(actor, "register_ecs")
            rec = ECSRecord(ecs_id)
            self._ecs[ecs_id] = rec
            return rec

    def deregister_ees(self, actor: str, ees_id: str) -> None:
        """Deregister an EES and, with it, every EAS registered through it."""
        with self._lock:
            ees = self._ees.get(ees_id)
            if ees is None or ees.state is not RegistrationState.REGISTERED:
                raise UnknownEES(f"unknown EES {ees_id}")
            self._require(actor, "register_ees")
            self._ees[ees_id] = replace(ees, state=RegistrationState.DEREGISTERED)
            for eas_id, eas in list(self._eas.items()):
                if eas.ees_id == ees_id:
                    del self._eas[eas_id]

    def deregister_eas(self, actor: str, eas_id: str) -> None:
        with self._lock:
            if eas_id not in self._eas:
                raise KeyError(f"unknown EAS {eas_id}")
            self._require(actor, "register_eas")
            del self._eas[eas_id]

    def drop_continuum(self, continuum_id: str) -> None:
        """Remove registrations tied to a continuum that left the Active family of states."""
        with self._lock:
            for ees_id, ees in list(self._ees.items()):
                if ees.continuum_id == continuum_id and ees.state is RegistrationState.REGISTERED:
                    self._ees[ees_id] = replace(ees, state=RegistrationState.DEREGISTERED)
                    for eas_id, eas in list(self._eas.items()):
                        if eas.ees_id == ees_id:
                            del self._eas[eas_id]

    def ees_records(self) -> list[EESRecord]:
        with self._lock:
            return [r for _, r in sorted(self._ees.items()) if r.state is RegistrationState.REGISTERED]

    def eas_records(self) -> list[EASRecord]:
        with self._lock:
            return [r for _, r in sorted(self._eas.items())]

    def provision_client(self, zone: str) -> ECSConfiguration:
        """EES candidates for a client in ``zone``, nearest first, ties by id."""
        if zone not in self.topology.zones:
            raise UnknownZone(f"unknown zone {zone}")
        found = []
        for rec in self.ees_records():
            lat = user_latency(self.topology, zone, rec.segment_id)
            if lat != UNREACHABLE:
                found.append(EESCandidate(rec.id, rec.segment_id, lat))
        found.sort(key=lambda c: (c.latency_ms, c.ees_id))
        return ECSConfiguration(zone, tuple(found))

    def eas_latency(self, ees: EESRecord, eas: EASRecord, zone: str | None = None) -> float:
        if zone is not None:
            return user_latency(self.topology, zone, eas.segment_id)
        return path_latency(self.topology, ees.segment_id, eas.segment_id)

    def discover_eas(self, ees_id: str, flt: DiscoveryFilter = DiscoveryFilter()) -> list[EASRecord]:
        """Every EAS under ``ees_id`` satisfying all filter predicates, nearest first."""
        with self._lock:
            ees = self._ees.get(ees_id)
            if ees is None or ees.state is not RegistrationState.REGISTERED:
                raise UnknownEES(f"unknown EES {ees_id}")
            if flt.zone is not None and flt.zone not in self.topology.zones:
                raise UnknownZone(f"unknown zone {flt.zone}")
            hits = []
            for eas in self._eas.values():
                if eas.ees_id != ees_id or not flt.capabilities <= eas.capabilities:
                    continue
                lat = self.eas_latency(ees, eas, flt.zone)
                if flt.max_latency_ms is not None and not lat <= flt.max_latency_ms:
                    continue
                hits.append((lat, eas.id, eas))
            hits.sort(key=lambda h: (h[0], h[1]))
            return [h[2] for h in hits]

    def check_integrity(self) -> list[str]:
        registered = {r.id for r in self.ees_records()}
        return [f"EAS {e.id} references {e.ees_id}" for e in self._eas.values() if e.ees_id not in registered]

