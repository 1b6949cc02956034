"""Conflict detection and resolution across loops, plus quality-target negotiation."""

from __future__ import annotations

import itertools
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from aiora.errors import Infeasible, NoLadderDeclared
from aiora.loops import ActionKind, ActuationProposal, ComposedLoop
from aiora.model import ZERO, ResourceVector, Topology
from aiora.placement import (
    ApplicationDescriptor,
    ObjectiveWeights,
    PlacementPlan,
    ServiceRequirements,
    place,
)
from aiora.twin import TwinSnapshot


class ConflictKind(str, Enum):
    SAME_TARGET = "SameTarget"
    SHARED_RESOURCE_CONTENTION = "SharedResourceContention"
    PARENT_CHILD_OVERLAP = "ParentChildOverlap"
    CONTRADICTORY_DIRECTION = "ContradictoryDirection"


@dataclass(frozen=True)
class Conflict:
    first: str
    second: str
    kind: ConflictKind

    def to_dict(self) -> dict[str, str]:
        return {"first": self.first, "second": self.second, "kind": self.kind.value}


@dataclass(frozen=True)
class ConflictReport:
    conflicts: tuple[Conflict, ...] = ()

    def __bool__(self) -> bool:
        return bool(self.conflicts)

    def __len__(self) -> int:
        return len(self.conflicts)

    def pairs(self) -> set[frozenset[str]]:
        return {frozenset((c.first, c.second)) for c in self.conflicts}

    def kinds(self, a: str, b: str) -> set[ConflictKind]:
        key = frozenset((a, b))
        return {c.kind for c in self.conflicts if frozenset((c.first, c.second)) == key}

    def to_dict(self) -> list[dict[str, str]]:
        return [c.to_dict() for c in self.conflicts]


@dataclass(frozen=True)
class Deferral:
    proposal: str
    reason: str
    blocking: str | None

    def to_dict(self) -> dict[str, Any]:
        return {"proposal": self.proposal, "reason": self.reason, "blocking": self.blocking}


@dataclass(frozen=True)
class CoordinationDecision:
    accepted: tuple[str, ...]
    deferred: tuple[Deferral, ...]
    negotiations: tuple[ActuationProposal, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "accepted": list(self.accepted),
            "deferred": [d.to_dict() for d in self.deferred],
            "negotiations": [p.id for p in self.negotiations],
        }


_RESOURCE_ACTIONS = (ActionKind.SCALE_UP, ActionKind.MIGRATE)


def _needs(proposals: Sequence[ActuationProposal]) -> dict[tuple[str, str], ResourceVector]:
    out: dict[tuple[str, str], ResourceVector] = {}
    for p in proposals:
        if p.action.kind not in _RESOURCE_ACTIONS:
            continue
        for seg, amount in p.demand.items():
            key = (p.continuum or "", seg)
            out[key] = out.get(key, ZERO) + amount
    return out


def fits(proposals: Sequence[ActuationProposal], snap: TwinSnapshot) -> bool:
    """Whether the combined resource demand can be met.

    Each continuum first draws on its own free quota on a segment; the
    overflow from all continuums together must fit the segment residual.
    """
    overflow: dict[str, ResourceVector] = {}
    for (cid, seg), need in _needs(proposals).items():
        free = snap.free_quota.get(cid, {}).get(seg, ZERO)
        overflow[seg] = overflow.get(seg, ZERO) + (need - free).clip()
    return all(extra <= snap.residuals.get(seg, ZERO) for seg, extra in overflow.items())


def _ancestors(loop_id: str, loops: Mapping[str, ComposedLoop]) -> list[str]:
    out = []
    cur = loops[loop_id].spec.parent if loop_id in loops else None
    while cur is not None and cur in loops and cur not in out:
        out.append(cur)
        cur = loops[cur].spec.parent
    return out


def detect_conflicts(
    proposals: Sequence[ActuationProposal],
    snap: TwinSnapshot,
    loops: Mapping[str, ComposedLoop] | None = None,
) -> ConflictReport:
    """Every conflicting pair, listed once per kind, in proposal-id order."""
    loops = loops or {}
    found: list[Conflict] = []
    ordered = sorted(proposals, key=lambda p: p.id)
    single_fit = {p.id: fits([p], snap) for p in ordered}
    for p, q in itertools.combinations(ordered, 2):
        if p.target == q.target:
            found.append(Conflict(p.id, q.id, ConflictKind.SAME_TARGET))
            kinds = {p.action.kind, q.action.kind}
            if kinds == {ActionKind.SCALE_UP, ActionKind.SCALE_DOWN}:
                found.append(Conflict(p.id, q.id, ConflictKind.CONTRADICTORY_DIRECTION))
        if (
            p.action.kind in _RESOURCE_ACTIONS
            and q.action.kind in _RESOURCE_ACTIONS
            and set(p.demand) & set(q.demand)
            and single_fit[p.id]
            and single_fit[q.id]
            and not fits([p, q], snap)
        ):
            found.append(Conflict(p.id, q.id, ConflictKind.SHARED_RESOURCE_CONTENTION))
        if p.loop_id != q.loop_id and p.loop_id in loops and q.loop_id in loops:
            related = q.loop_id in _ancestors(p.loop_id, loops) or p.loop_id in _ancestors(q.loop_id, loops)
            if related and loops[p.loop_id].spec.targets & loops[q.loop_id].spec.targets:
                found.append(Conflict(p.id, q.id, ConflictKind.PARENT_CHILD_OVERLAP))
    return ConflictReport(tuple(found))


def precedence_key(p: ActuationProposal, loops: Mapping[str, ComposedLoop]) -> tuple[int, int, str, str]:
    depth = loops[p.loop_id].depth if p.loop_id in loops else 1
    return (-p.priority, depth, p.loop_id, p.id)


def resolve(
    proposals: Sequence[ActuationProposal],
    report: ConflictReport,
    loops: Mapping[str, ComposedLoop] | None = None,
    snap: TwinSnapshot | None = None,
) -> CoordinationDecision:
    """Greedy seating by (priority desc, nesting depth asc, loop id, proposal id).

    A candidate is seated unless it conflicts with an already seated one.
    With a snapshot, a candidate whose demand no longer fits next to the
    seated ones is deferred as well, so the accepted set is jointly
    enactable. The first candidate is always seated.
    """
    loops = loops or {}
    conflicts = report.pairs()
    accepted: list[ActuationProposal] = []
    deferred: list[Deferral] = []
    for p in sorted(proposals, key=lambda p: precedence_key(p, loops)):
        blocker = next((a for a in accepted if frozenset((a.id, p.id)) in conflicts), None)
        if blocker is not None:
            kinds = sorted(k.value for k in report.kinds(blocker.id, p.id))
            deferred.append(Deferral(p.id, "conflict: " + ",".join(kinds), blocker.id))
            continue
        if accepted and snap is not None and not fits([*accepted, p], snap):
            shared = [a for a in accepted if set(a.demand) & set(p.demand)]
            deferred.append(Deferral(p.id, "cumulative capacity", shared[0].id if shared else None))
            continue
        accepted.append(p)
    negotiations = tuple(p for p in accepted if p.action.kind is ActionKind.NEGOTIATE_QUALITY)
    return CoordinationDecision(tuple(p.id for p in accepted), tuple(deferred), negotiations)


# -- negotiation ------------------------------------------------------------------
_REQUIREMENT_KEYS = {"max_latency", "min_throughput", "data_locality", "carbon_cap", "availability_class"}


def relax(base: ServiceRequirements, rung: Mapping[str, Any]) -> ServiceRequirements:
    """Apply one ladder rung. ``max_latency_factor`` scales the current bound; ``None`` removes a cap."""
    d = base.to_dict()
    for key, value in rung.items():
        if key == "max_latency_factor":
            d["max_latency"] = d["max_latency"] * float(value)
        elif key in _REQUIREMENT_KEYS:
            d[key] = value
        else:
            raise ValueError(f"unknown ladder key {key}")
    return ServiceRequirements.from_dict(d)


@dataclass(frozen=True)
class NegotiationOutcome:
    accepted: bool
    requirements: ServiceRequirements | None
    rung: int | None
    plan: PlacementPlan | None
    tried: tuple[tuple[int, tuple[str, ...]], ...] = field(default_factory=tuple)

    def to_dict(self) -> dict[str, Any]:
        return {
            "accepted": self.accepted,
            "rung": self.rung,
            "requirements": self.requirements.to_dict() if self.requirements else None,
            "assignment": dict(self.plan.assignment) if self.plan else None,
            "tried": [{"rung": i, "blocking": list(b)} for i, b in self.tried],
        }


def negotiate_quality_targets(
    app: ApplicationDescriptor,
    blocking: Sequence[str],
    ladder: Sequence[Mapping[str, Any]] | None,
    topology: Topology,
    weights: ObjectiveWeights,
    available: Mapping[str, ResourceVector] | None = None,
) -> NegotiationOutcome:
    """Walk the provider's ladder and return the first rung that places.

    Rungs are cumulative: rung ``i`` applies overrides ``0..i`` in order.
    ``blocking`` is what made the original requirements fail; it is kept
    as the entry for rung -1 in ``tried``.
    """
    if ladder is None:
        raise NoLadderDeclared(app.id)
    tried: list[tuple[int, tuple[str, ...]]] = [(-1, tuple(blocking))]
    reqs = app.requirements
    for i, rung in enumerate(ladder):
        reqs = relax(reqs, rung)
        candidate = app.with_requirements(reqs)
        try:
            plan = place(topology, candidate, weights, available)
        except Infeasible as exc:
            tried.append((i, tuple(exc.kinds)))
            continue
        return NegotiationOutcome(True, reqs, i, plan, tuple(tried))
    return NegotiationOutcome(False, None, None, None, tuple(tried))
