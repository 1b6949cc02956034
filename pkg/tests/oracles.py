"""Independent reference implementations used as test oracles.

Nothing here imports the package's search, matching or shortest-path code;
each oracle recomputes its answer from first principles by brute force.
"""

from __future__ import annotations

import itertools
import math
import random
from collections.abc import Mapping, Sequence

from aiora.model import (
    Agreement,
    LinkDescriptor,
    ResourceVector,
    SegmentDescriptor,
    SegmentKind,
    StakeholderDescriptor,
    StakeholderRole,
    Topology,
)
from aiora.placement import (
    ApplicationDescriptor,
    ComponentRole,
    ComponentSpec,
    ObjectiveWeights,
    ServiceRequirements,
)

INF = math.inf


def floyd_warshall(t: Topology) -> dict[str, dict[str, float]]:
    ids = [s.id for s in t.segments]
    d = {a: {b: (0.0 if a == b else INF) for b in ids} for a in ids}
    for link in t.links:
        if link.a in d and link.b in d:
            d[link.a][link.b] = min(d[link.a][link.b], link.latency)
            d[link.b][link.a] = min(d[link.b][link.a], link.latency)
    for k in ids:
        for i in ids:
            for j in ids:
                if d[i][k] + d[k][j] < d[i][j]:
                    d[i][j] = d[i][k] + d[k][j]
    return d


def zone_latency(t: Topology, dist: Mapping[str, Mapping[str, float]], zone: str, seg: str) -> float:
    access = t.zones.get(zone, {})
    return min((ms + dist[a][seg] for a, ms in access.items() if a in dist), default=INF)


def _fits(a: ResourceVector, b: ResourceVector) -> bool:
    return all(x <= y for x, y in zip(a.components(), b.components()))


def brute_force_place(
    t: Topology,
    app: ApplicationDescriptor,
    w: ObjectiveWeights,
    available: Mapping[str, ResourceVector] | None = None,
) -> tuple[float, dict[str, str]] | None:
    """Enumerate every assignment; return (scalar, assignment) of the cheapest feasible one."""
    segs = {s.id: s for s in t.segments}
    avail = dict(available) if available is not None else {s.id: s.capacity for s in t.segments}
    ids = sorted(avail)
    dist = floyd_warshall(t)
    req = app.requirements
    comps = app.components
    bearers = {c.id for c in comps if c.role is ComponentRole.EAS} or {c.id for c in comps}

    # normalizers, from their definitions
    n_lat = w.norm_latency if w.norm_latency is not None else req.max_latency
    n_energy = w.norm_energy if w.norm_energy is not None else sum(s.power_max for s in t.segments)
    if w.norm_carbon is not None:
        n_carbon = w.norm_carbon
    elif req.carbon_cap is not None and req.carbon_cap > 0:
        n_carbon = req.carbon_cap
    else:
        n_carbon = max(s.power_max / 1000.0 * s.carbon_intensity for s in t.segments)
    cores = sum(c.demand.cpu for c in comps) / 1000.0
    n_cost = w.norm_cost if w.norm_cost is not None else max(s.unit_cost for s in t.segments) * (cores or 1.0)
    n_lat, n_energy, n_carbon, n_cost = (x if x > 0 else 1.0 for x in (n_lat, n_energy, n_carbon, n_cost))

    best: tuple[float, dict[str, str]] | None = None
    for combo in itertools.product(ids, repeat=len(comps)):
        assign = {c.id: s for c, s in zip(comps, combo)}
        load: dict[str, ResourceVector] = {}
        ok = True
        lat = energy = carbon = money = 0.0
        for c in comps:
            s = segs[assign[c.id]]
            load[s.id] = load.get(s.id, ResourceVector()) + c.demand
            if req.data_locality is not None and c.demand.storage > 0 and s.zone not in req.data_locality:
                ok = False
            if c.id in bearers:
                ul = zone_latency(t, dist, req.user_zone, s.id)
                if ul > req.max_latency or req.min_throughput > s.capacity.bandwidth:
                    ok = False
                lat = max(lat, ul)
            watts = (s.power_max - s.power_idle) * c.demand.cpu / s.capacity.cpu if s.capacity.cpu else 0.0
            energy += watts
            carbon += watts / 1000.0 * s.carbon_intensity
            money += s.unit_cost * c.demand.cpu / 1000.0
            for other in comps:
                if other.id == c.id:
                    continue
                if (other.id in c.colocation or c.id in other.colocation) and assign[other.id] != s.id:
                    ok = False
                if (other.id in c.anti_affinity or c.id in other.anti_affinity) and assign[other.id] == s.id:
                    ok = False
        if not ok or any(not _fits(v, avail[sid]) for sid, v in load.items()):
            continue
        if req.carbon_cap is not None and carbon > req.carbon_cap:
            continue
        scalar = (
            w.w_latency * lat / n_lat
            + w.w_energy * energy / n_energy
            + w.w_carbon * carbon / n_carbon
            + w.w_cost * money / n_cost
        )
        if best is None or scalar < best[0]:
            best = (scalar, assign)
    return best


def brute_force_distinct_fit(
    demands: Sequence[ResourceVector], candidates: Sequence[Sequence[str]]
) -> bool:
    """Is there an injective choice of segment per demand among its candidates?"""
    if not demands:
        return True
    pools = [list(c) for c in candidates]
    return any(len(set(pick)) == len(pick) for pick in itertools.product(*pools))


# -- random instances ----------------------------------------------------------------
_KINDS = (SegmentKind.RADIO_ACCESS, SegmentKind.EDGE, SegmentKind.CLOUD)


def random_topology(rng: random.Random, n_segments: int, zones: int = 2) -> Topology:
    stakeholders = (
        StakeholderDescriptor("mno", StakeholderRole.MNO, (Agreement("edge", 0.5),)),
        StakeholderDescriptor("edge", StakeholderRole.EDGE_PROVIDER),
        StakeholderDescriptor("app", StakeholderRole.APP_PROVIDER),
    )
    zone_ids = [f"z{i}" for i in range(zones)]
    segments = []
    for i in range(n_segments):
        idle = rng.uniform(10, 300)
        segments.append(
            SegmentDescriptor(
                id=f"s{i}",
                owner=rng.choice(["mno", "edge"]),
                kind=rng.choice(_KINDS),
                capacity=ResourceVector(
                    rng.choice([2000, 4000, 8000, 16000]),
                    rng.choice([4096, 8192, 16384]),
                    rng.choice([0, 50, 200]),
                    rng.choice([500, 1000, 5000]),
                ),
                power_idle=idle,
                power_max=idle + rng.uniform(1, 900),
                carbon_intensity=rng.uniform(20, 600),
                zone=rng.choice(zone_ids + ["dc"]),
                unit_cost=round(rng.uniform(0, 0.2), 3),
            )
        )
    links = []
    for i in range(1, n_segments):
        links.append(LinkDescriptor(f"s{rng.randrange(i)}", f"s{i}", round(rng.uniform(1, 30), 2)))
    for _ in range(rng.randrange(n_segments)):
        a, b = rng.sample(range(n_segments), 2) if n_segments > 1 else (0, 0)
        if a != b:
            links.append(LinkDescriptor(f"s{a}", f"s{b}", round(rng.uniform(1, 30), 2)))
    zmap = {}
    for z in zone_ids:
        picks = rng.sample(range(n_segments), min(n_segments, rng.randint(1, 2)))
        zmap[z] = {f"s{p}": round(rng.uniform(0.5, 5), 2) for p in picks}
    return Topology(stakeholders, tuple(segments), tuple(links), zmap)


def random_app(rng: random.Random, n_components: int, zones: int = 2) -> ApplicationDescriptor:
    ids = [f"c{i}" for i in range(n_components)]
    comps = []
    pairs_co: set[tuple[str, str]] = set()
    pairs_anti: set[tuple[str, str]] = set()
    for i in range(1, n_components):
        r = rng.random()
        j = rng.randrange(i)
        if r < 0.15:
            pairs_co.add((ids[i], ids[j]))
        elif r < 0.3:
            pairs_anti.add((ids[i], ids[j]))
    for i, cid in enumerate(ids):
        comps.append(
            ComponentSpec(
                cid,
                ResourceVector(
                    rng.choice([250, 500, 1000, 2000, 4000]),
                    rng.choice([256, 1024, 4096]),
                    rng.choice([0, 0, 10, 40]),
                    rng.choice([10, 100, 400]),
                ),
                ComponentRole.EAS if rng.random() < 0.4 else ComponentRole.GENERIC,
                frozenset(b for a, b in pairs_co if a == cid),
                frozenset(b for a, b in pairs_anti if a == cid),
            )
        )
    locality = None
    if rng.random() < 0.2:
        locality = frozenset(rng.sample([f"z{i}" for i in range(zones)] + ["dc"], 2))
    req = ServiceRequirements(
        user_zone=f"z{rng.randrange(zones)}",
        max_latency=rng.choice([15.0, 30.0, 60.0, 200.0]),
        min_throughput=rng.choice([0.0, 0.0, 800.0]),
        data_locality=locality,
        carbon_cap=rng.choice([None, None, 100.0, 400.0]),
    )
    return ApplicationDescriptor("app", "app", tuple(comps), req)


def random_weights(rng: random.Random) -> ObjectiveWeights:
    return ObjectiveWeights(
        w_latency=rng.choice([0.0, rng.uniform(0, 1)]),
        w_energy=rng.uniform(0, 1),
        w_carbon=rng.choice([0.0, rng.uniform(0, 1)]),
        w_cost=rng.choice([0.0, rng.uniform(0, 1)]),
    )


def random_instance(seed: int) -> tuple[Topology, ApplicationDescriptor, ObjectiveWeights]:
    rng = random.Random(seed)
    t = random_topology(rng, rng.randint(1, 6))
    return t, random_app(rng, rng.randint(1, 4)), random_weights(rng)
