"""Virtual resource broker: federated inventory, feasibility checks, reservations.

Amounts are integers so the ledger is exact. Every mutation runs under one
lock, which plays the role of the broker's serialized command queue.
"""

from __future__ import annotations

import json
import threading
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Any, Union

from aiora.errors import (
    AgreementExceeded,
    AlreadyReleased,
    DuplicateSegment,
    InsufficientCapacity,
    SegmentBusy,
    UnknownReservation,
    UnknownSegment,
)
from aiora.model import (
    ZERO,
    Agreement,
    ResourceVector,
    SegmentDescriptor,
    SegmentKind,
    StakeholderDescriptor,
    StakeholderRole,
)


class ReservationState(str, Enum):
    HELD = "Held"
    RELEASED = "Released"


@dataclass(frozen=True)
class Reservation:
    id: str
    continuum_id: str
    segment_id: str
    amount: ResourceVector
    state: ReservationState = ReservationState.HELD

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "continuum_id": self.continuum_id,
            "segment_id": self.segment_id,
            "amount": self.amount.to_dict(),
            "state": self.state.value,
        }


@dataclass(frozen=True)
class SegmentFilter:
    """Matches segments; ``None`` fields match anything."""

    segment_ids: frozenset[str] | None = None
    kinds: frozenset[SegmentKind] | None = None
    zones: frozenset[str] | None = None
    owners: frozenset[str] | None = None

    def __call__(self, seg: SegmentDescriptor) -> bool:
        return (
            (self.segment_ids is None or seg.id in self.segment_ids)
            and (self.kinds is None or seg.kind in self.kinds)
            and (self.zones is None or seg.zone in self.zones)
            and (self.owners is None or seg.owner in self.owners)
        )

    @classmethod
    def only(cls, segment_id: str) -> SegmentFilter:
        return cls(segment_ids=frozenset([segment_id]))


ANY_SEGMENT = SegmentFilter()

SegmentPredicate = Union[SegmentFilter, Callable[[SegmentDescriptor], bool]]


@dataclass(frozen=True)
class FeasibilityReport:
    feasible: bool
    residuals: Mapping[str, ResourceVector]
    blocking: tuple[tuple[str, str], ...] = ()
    # demand index -> segment id, when feasible
    assignment: tuple[str, ...] = ()


@dataclass(frozen=True)
class SegmentUsage:
    capacity: ResourceVector
    held: ResourceVector
    residual: ResourceVector

    def to_dict(self) -> dict[str, Any]:
        return {
            "capacity": self.capacity.to_dict(),
            "held": self.held.to_dict(),
            "residual": self.residual.to_dict(),
        }


@dataclass
class _Entry:
    segment: SegmentDescriptor
    residual: ResourceVector
    online: bool = True


class ResourceBroker:
    def __init__(self, stakeholders: Iterable[StakeholderDescriptor] = ()) -> None:
        self._lock = threading.RLock()
        self._stakeholders: dict[str, StakeholderDescriptor] = {s.id: s for s in stakeholders}
        self._segments: dict[str, _Entry] = {}
        self._reservations: dict[str, Reservation] = {}
        self._held_by_segment: dict[str, set[str]] = {}
        self._consumers: dict[str, str] = {}
        self._seq = 0

    # -- inventory -----------------------------------------------------
    def register_segment(self, s: SegmentDescriptor) -> None:
        with self._lock:
            if s.id in self._segments:
                raise DuplicateSegment(f"segment {s.id} already registered")
            if not s.capacity.is_nonnegative():
                raise ValueError(f"segment {s.id} has negative capacity")
            self._segments[s.id] = _Entry(s, s.capacity)
            self._held_by_segment[s.id] = set()

    def deregister_segment(self, segment_id: str) -> None:
        with self._lock:
            entry = self._entry(segment_id)
            if self._held_by_segment[segment_id]:
                raise SegmentBusy(f"segment {segment_id} has held reservations")
            owner = entry.segment.owner
            fleet_after = self._fleet_capacity(owner) - entry.segment.capacity
            for consumer in self._consumers_of(owner):
                limit = self._agreement_limit(owner, consumer, fleet_after)
                if limit is not None and not self._held_for_pair(owner, consumer) <= limit:
                    raise SegmentBusy(
                        f"removing {segment_id} would break the agreement between {owner} and {consumer}"
                    )
            del self._segments[segment_id]
            del self._held_by_segment[segment_id]

    def set_online(self, segment_id: str, online: bool) -> None:
        """Offline segments keep their ledger but are hidden from feasibility checks."""
        with self._lock:
            self._entry(segment_id).online = online

    def is_online(self, segment_id: str) -> bool:
        return self._entry(segment_id).online

    def bind_continuum(self, continuum_id: str, business_provider: str) -> None:
        """Declare which stakeholder consumes resources on behalf of a continuum."""
        with self._lock:
            bound = self._consumers.get(continuum_id)
            if bound is not None and bound != business_provider and self.held(continuum_id):
                raise ValueError(f"continuum {continuum_id} holds reservations as {bound}")
            self._consumers[continuum_id] = business_provider

    def segment_ids(self) -> list[str]:
        return sorted(self._segments)

    def segment(self, segment_id: str) -> SegmentDescriptor:
        return self._entry(segment_id).segment

    def residual(self, segment_id: str) -> ResourceVector:
        return self._entry(segment_id).residual

    def residuals(self, online_only: bool = False) -> dict[str, ResourceVector]:
        with self._lock:
            return {
                sid: e.residual
                for sid, e in sorted(self._segments.items())
                if e.online or not online_only
            }

    # -- feasibility -----------------------------------------------------
    def query_feasibility(
        self, req: Sequence[tuple[SegmentPredicate, ResourceVector]]
    ) -> FeasibilityReport:
        """Check whether each demand fits a distinct matching segment. Read-only."""
        with self._lock:
            residuals = {sid: e.residual for sid, e in sorted(self._segments.items())}
            online = [sid for sid, e in sorted(self._segments.items()) if e.online]
            candidates: list[list[str]] = []
            blocking: list[tuple[str, str]] = []
            for i, (pred, demand) in enumerate(req):
                matching = [sid for sid in online if pred(self._segments[sid].segment)]
                fits = [sid for sid in matching if demand <= residuals[sid]]
                if not matching:
                    blocking.append(("filter", f"demand {i}: no online segment matches the filter"))
                elif not fits:
                    blocking.append(("capacity", f"demand {i}: exceeds the residual of every matching segment"))
                candidates.append(fits)
            if blocking:
                return FeasibilityReport(False, residuals, tuple(blocking))
            match = _bipartite_match(candidates)
            if match is None:
                return FeasibilityReport(
                    False,
                    residuals,
                    (("disjointness", "demands cannot be spread over distinct segments"),),
                )
            return FeasibilityReport(True, residuals, (), tuple(match))

    # -- reservations ------------------------------------------------------
    def reserve(self, continuum_id: str, segment_id: str, amount: ResourceVector) -> Reservation:
        with self._lock:
            entry = self._entry(segment_id)
            if not amount.is_nonnegative():
                raise ValueError("reservation amount must be non-negative")
            if not amount <= entry.residual:
                raise InsufficientCapacity(
                    f"{segment_id}: {', '.join(amount.exceeded(entry.residual))} exceed residual"
                )
            consumer = self._consumers.get(continuum_id)
            owner = entry.segment.owner
            if consumer is not None:
                limit = self._agreement_limit(owner, consumer, self._fleet_capacity(owner))
                if limit is not None:
                    held = self._held_for_pair(owner, consumer)
                    if not held + amount <= limit:
                        raise AgreementExceeded(
                            f"{consumer} on {owner}: {', '.join((held + amount).exceeded(limit))} over agreement"
                        )
            self._seq += 1
            res = Reservation(f"r{self._seq:06d}", continuum_id, segment_id, amount)
            self._reservations[res.id] = res
            self._held_by_segment[segment_id].add(res.id)
            entry.residual = entry.residual - amount
            return res

    def release(self, reservation_id: str) -> None:
        with self._lock:
            res = self._reservations.get(reservation_id)
            if res is None:
                raise UnknownReservation(f"unknown reservation {reservation_id}")
            if res.state is ReservationState.RELEASED:
                raise AlreadyReleased(f"reservation {reservation_id} already released")
            self._reservations[reservation_id] = replace(res, state=ReservationState.RELEASED)
            entry = self._segments.get(res.segment_id)
            if entry is not None:
                entry.residual = entry.residual + res.amount
                self._held_by_segment[res.segment_id].discard(reservation_id)

    def reservation(self, reservation_id: str) -> Reservation:
        try:
            return self._reservations[reservation_id]
        except KeyError:
            raise UnknownReservation(f"unknown reservation {reservation_id}") from None

    def held(self, continuum_id: str | None = None) -> list[Reservation]:
        with self._lock:
            return [
                r
                for _, r in sorted(self._reservations.items())
                if r.state is ReservationState.HELD
                and (continuum_id is None or r.continuum_id == continuum_id)
            ]

    def utilization_report(self) -> dict[str, SegmentUsage]:
        with self._lock:
            out = {}
            for sid, entry in sorted(self._segments.items()):
                held = ResourceVector.total(self._reservations[r].amount for r in self._held_by_segment[sid])
                out[sid] = SegmentUsage(entry.segment.capacity, held, entry.residual)
            return out

    # -- agreements ---------------------------------------------------------
    def _fleet_capacity(self, owner: str) -> ResourceVector:
        return ResourceVector.total(
            e.segment.capacity for e in self._segments.values() if e.segment.owner == owner
        )

    def _agreement_limit(self, owner: str, consumer: str, fleet: ResourceVector) -> ResourceVector | None:
        if owner == consumer:
            return None
        desc = self._stakeholders.get(owner)
        fraction = Fraction(repr(desc.allowed_fraction(consumer))) if desc else Fraction(0)
        return ResourceVector(*(int(fraction * c) for c in fleet.components()))

    def _held_for_pair(self, owner: str, consumer: str) -> ResourceVector:
        total = ZERO
        for sid, ids in self._held_by_segment.items():
            if self._segments[sid].segment.owner != owner:
                continue
            for rid in ids:
                r = self._reservations[rid]
                if self._consumers.get(r.continuum_id) == consumer:
                    total = total + r.amount
        return total

    def _consumers_of(self, owner: str) -> list[str]:
        return sorted({c for c in self._consumers.values() if c != owner})

    def agreement_usage(self) -> list[tuple[str, str, ResourceVector, ResourceVector]]:
        """(owner, consumer, held, limit) for every bound consumer of every owner."""
        with self._lock:
            out = []
            owners = sorted({e.segment.owner for e in self._segments.values()})
            for owner in owners:
                fleet = self._fleet_capacity(owner)
                for consumer in self._consumers_of(owner):
                    limit = self._agreement_limit(owner, consumer, fleet)
                    if limit is not None:
                        out.append((owner, consumer, self._held_for_pair(owner, consumer), limit))
            return out

    # -- helpers ------------------------------------------------------------
    def _entry(self, segment_id: str) -> _Entry:
        try:
            return self._segments[segment_id]
        except KeyError:
            raise UnknownSegment(segment_id) from None

    # -- checkpointing --------------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        with self._lock:
            return {
                "stakeholders": [
                    {
                        "id": s.id,
                        "role": s.role.value,
                        "agreements": [{"peer": a.peer, "fraction": a.fraction} for a in s.agreements],
                    }
                    for _, s in sorted(self._stakeholders.items())
                ],
                "segments": [
                    {
                        "id": sid,
                        "owner": e.segment.owner,
                        "kind": e.segment.kind.value,
                        "capacity": e.segment.capacity.to_dict(),
                        "power_idle": e.segment.power_idle,
                        "power_max": e.segment.power_max,
                        "carbon_intensity": e.segment.carbon_intensity,
                        "zone": e.segment.zone,
                        "unit_cost": e.segment.unit_cost,
                        "online": e.online,
                    }
                    for sid, e in sorted(self._segments.items())
                ],
                "consumers": dict(sorted(self._consumers.items())),
                "reservations": [r.to_dict() for _, r in sorted(self._reservations.items())],
                "seq": self._seq,
            }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ResourceBroker:
        broker = cls(
            StakeholderDescriptor(
                s["id"],
                StakeholderRole(s["role"]),
                tuple(Agreement(a["peer"], float(a["fraction"])) for a in s.get("agreements", [])),
            )
            for s in data.get("stakeholders", [])
        )
        for raw in data.get("segments", []):
            seg = SegmentDescriptor(
                id=raw["id"],
                owner=raw["owner"],
                kind=SegmentKind(raw["kind"]),
                capacity=ResourceVector.from_dict(raw["capacity"]),
                power_idle=raw["power_idle"],
                power_max=raw["power_max"],
                carbon_intensity=raw["carbon_intensity"],
                zone=raw.get("zone", ""),
                unit_cost=raw.get("unit_cost", 0.0),
            )
            broker.register_segment(seg)
            broker._segments[seg.id].online = bool(raw.get("online", True))
        broker._consumers = dict(data.get("consumers", {}))
        for raw in data.get("reservations", []):
            res = Reservation(
                raw["id"],
                raw["continuum_id"],
                raw["segment_id"],
                ResourceVector.from_dict(raw["amount"]),
                ReservationState(raw["state"]),
            )
            broker._reservations[res.id] = res
            if res.state is ReservationState.HELD:
                entry = broker._segments[res.segment_id]
                entry.residual = entry.residual - res.amount
                broker._held_by_segment[res.segment_id].add(res.id)
        broker._seq = int(data.get("seq", len(broker._reservations)))
        return broker

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> ResourceBroker:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _bipartite_match(candidates: Sequence[Sequence[str]]) -> list[str] | None:
    """Kuhn's augmenting-path matching; returns segment per demand or None."""
    owner_of: dict[str, int] = {}

    def augment(i: int, seen: set[str]) -> bool:
        for sid in candidates[i]:
            if sid in seen:
                continue
            seen.add(sid)
            if sid not in owner_of or augment(owner_of[sid], seen):
                owner_of[sid] = i
                return True
        return False

    for i in range(len(candidates)):
        if not augment(i, set()):
            return None
    match = [""] * len(candidates)
    for sid, i in owner_of.items():
        match[i] = sid
    return match
