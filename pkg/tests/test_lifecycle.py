from __future__ import annotations

import pytest
from builders import PARTIES, RV, app, comp, link, seg, topo
from hypothesis import given, settings
from hypothesis import strategies as st
from walks import broker_walk, lifecycle_walk

from aiora.broker import ResourceBroker
from aiora.errors import (
    ContinuumNotActive,
    IllegalTransition,
    Infeasible,
    InsufficientCapacity,
    MigrationInProgress,
    PlanesIncomplete,
    UnauthorizedScenario,
    UnknownApplication,
)
from aiora.exposure import BusinessScenario
from aiora.lifecycle import (
    ContinuumRequest,
    ContinuumState,
    InstanceState,
    LifecycleManager,
    MigrationMode,
    Plane,
)
from aiora.placement import ObjectiveWeights

W = ObjectiveWeights(w_latency=1.0)
Q = RV(4000, 8192, 100, 1000)


def manager(delay: int = 2) -> LifecycleManager:
    t = topo(
        [seg("e1", zone="z1"), seg("e2", zone="z2"), seg("cloud", cap=RV(64000, 262144, 10000, 40000))],
        [link("e1", "e2", 20.0), link("e1", "cloud", 25.0), link("e2", "cloud", 25.0)],
        {"z1": {"e1": 3.0}, "z2": {"e2": 3.0}},
    )
    b = ResourceBroker(PARTIES)
    for s in t.segments:
        b.register_segment(s)
    return LifecycleManager(t, b, delay)


def active(lm: LifecycleManager, cid: str = "c1", quotas=(("e1", Q), ("e2", Q))) -> None:
    lm.create_continuum(ContinuumRequest(cid, "edgeco", tuple(quotas)))
    lm.transition(cid, ContinuumState.INSTANTIATED)
    lm.transition(cid, ContinuumState.ACTIVE)


def test_create_holds_quota_reservations() -> None:
    lm = manager()
    cont = lm.create_continuum(ContinuumRequest("c1", "edgeco", (("e1", Q),)))
    assert cont.state is ContinuumState.PREPARED
    assert [r.amount for r in lm.broker.held("c1")] == [Q]


def test_create_over_capacity_leaks_nothing() -> None:
    lm = manager()
    with pytest.raises(Infeasible):
        lm.create_continuum(ContinuumRequest("c1", "edgeco", (("e1", Q), ("e2", RV(10**6, 0, 0, 0)))))
    assert lm.broker.held() == []
    assert lm.broker.residual("e1") == lm.topology.segment("e1").capacity


def test_two_continuums_share_a_segment() -> None:
    lm = manager()
    half = RV(8000, 16384, 250, 5000)
    lm.create_continuum(ContinuumRequest("c1", "edgeco", (("e1", half),)))
    lm.create_continuum(ContinuumRequest("c2", "edgeco", (("e1", half),)))
    assert lm.broker.residual("e1") == RV()
    with pytest.raises(Infeasible):
        lm.create_continuum(ContinuumRequest("c3", "edgeco", (("e1", RV(1, 0, 0, 0)),)))


def test_scenario_gate_on_create() -> None:
    lm = manager()
    with pytest.raises(UnauthorizedScenario):
        lm.create_continuum(ContinuumRequest("c1", "mno", (("e1", Q),), BusinessScenario.c("mno", "edgeco", "appco")))


def test_transition_rules() -> None:
    lm = manager()
    lm.create_continuum(ContinuumRequest("c1", "edgeco", (("e1", Q),)))
    with pytest.raises(IllegalTransition):
        lm.transition("c1", ContinuumState.ACTIVE)
    lm.transition("c1", ContinuumState.INSTANTIATED)
    lm.transition("c1", ContinuumState.ACTIVE)
    lm.transition("c1", ContinuumState.MAINTENANCE)
    lm.transition("c1", ContinuumState.ACTIVE)
    lm.transition("c1", ContinuumState.TERMINATED)
    assert lm.broker.held("c1") == []
    with pytest.raises(IllegalTransition):
        lm.transition("c1", ContinuumState.ACTIVE)


def test_activation_needs_all_planes() -> None:
    lm = manager()
    lm.create_continuum(ContinuumRequest("c1", "edgeco", (("e1", Q),), planes=frozenset({Plane.USER})))
    lm.transition("c1", ContinuumState.INSTANTIATED)
    with pytest.raises(PlanesIncomplete):
        lm.transition("c1", ContinuumState.ACTIVE)
    lm.set_planes("c1", list(Plane))
    lm.transition("c1", ContinuumState.ACTIVE)


def test_modify_is_atomic() -> None:
    lm = manager()
    active(lm)
    before = lm.quota("c1")
    with pytest.raises(InsufficientCapacity):
        lm.modify_continuum("c1", add_quotas=[("e1", RV(1, 0, 0, 0)), ("e2", RV(10**7, 0, 0, 0))])
    assert lm.quota("c1") == before
    assert lm.continuum("c1").state is ContinuumState.ACTIVE
    lm.modify_continuum("c1", add_quotas=[("cloud", Q)], config={"k": 1})
    assert lm.quota("c1")["cloud"] == Q and lm.continuum("c1").config == {"k": 1}


def test_deploy_within_quota() -> None:
    lm = manager()
    active(lm)
    rec = lm.deploy_application("c1", app([comp("x")]), W)
    assert rec.plan.assignment == {"x": "e1"}
    assert [i.state for i in rec.instances["x"]] == [InstanceState.READY]
    assert lm.free_quota("c1")["e1"] == Q - comp("x").demand


def test_quota_binds_before_capacity() -> None:
    # 5000 millicores fit the 16000 segment but not the 4000 quota
    lm = manager()
    active(lm)
    with pytest.raises(Infeasible):
        lm.deploy_application("c1", app([comp("x", cpu=5000)]), W)


def test_deploy_needs_active_continuum() -> None:
    lm = manager()
    lm.create_continuum(ContinuumRequest("c1", "edgeco", (("e1", Q),)))
    with pytest.raises(ContinuumNotActive):
        lm.deploy_application("c1", app([comp("x")]), W)


def ready_by_tick(lm: LifecycleManager, app_id: str, comp_id: str, until: int) -> list[int]:
    counts = []
    for t in range(lm.now + 1, until):
        lm.advance(t)
        counts.append(lm.deployment("c1", app_id).ready_count(comp_id))
    return counts


def test_make_before_break_keeps_an_instance_ready() -> None:
    lm = manager(delay=3)
    active(lm)
    lm.deploy_application("c1", app([comp("x")]), W)
    report = lm.migrate_component("c1", "a1", "x", "e2", MigrationMode.MAKE_BEFORE_BREAK)
    assert report.downtime_ticks == 0
    assert lm.deployment("c1", "a1").ready_count("x") == 1
    counts = ready_by_tick(lm, "a1", "x", 8)
    assert min(counts) >= 1
    assert lm.deployment("c1", "a1").plan.assignment == {"x": "e2"}
    assert [i.segment for i in lm.deployment("c1", "a1").instances["x"]] == ["e2"]


def test_break_before_make_downtime_equals_delay() -> None:
    lm = manager(delay=3)
    active(lm)
    lm.deploy_application("c1", app([comp("x")]), W)
    report = lm.migrate_component("c1", "a1", "x", "e2", MigrationMode.BREAK_BEFORE_MAKE)
    assert report.downtime_ticks == 3
    zero = [lm.deployment("c1", "a1").ready_count("x")] + ready_by_tick(lm, "a1", "x", 8)
    assert zero.count(0) == 3


def test_migration_rejects_anti_affinity_and_overlap() -> None:
    lm = manager()
    active(lm)
    lm.deploy_application("c1", app([comp("x", anti=["y"]), comp("y")], zone="z1"), W)
    rec = lm.deployment("c1", "a1")
    other = rec.plan.assignment["y"]
    with pytest.raises(Infeasible) as err:
        lm.migrate_component("c1", "a1", "x", other)
    assert "anti_affinity" in err.value.kinds
    lm.modify_continuum("c1", add_quotas=[("cloud", Q)])
    lm.migrate_component("c1", "a1", "x", "cloud")
    with pytest.raises(MigrationInProgress):
        lm.migrate_component("c1", "a1", "x", rec.plan.assignment["y"])


def test_terminate_restores_quota_and_rejects_twice() -> None:
    lm = manager()
    active(lm)
    before = lm.free_quota("c1")
    lm.deploy_application("c1", app([comp("x")]), W)
    lm.terminate_application("c1", "a1")
    assert lm.free_quota("c1") == before
    with pytest.raises(UnknownApplication):
        lm.terminate_application("c1", "a1")


def test_terminate_during_migration_stops_both() -> None:
    lm = manager()
    active(lm)
    rec = lm.deploy_application("c1", app([comp("x")]), W)
    lm.migrate_component("c1", "a1", "x", "e2")
    insts = list(rec.instances["x"])
    assert len(insts) == 2
    lm.terminate_application("c1", "a1")
    assert all(i.state is InstanceState.STOPPED for i in insts)
    assert lm.used("c1") == {}


def test_scale_expands_quota_when_allowed() -> None:
    lm = manager()
    active(lm)
    lm.deploy_application("c1", app([comp("x", cpu=3000)]), W)
    with pytest.raises(Infeasible):
        lm.scale_application("c1", "a1", 1)
    assert lm.scale_application("c1", "a1", 1, expand_quota=True) == 2
    assert lm.quota("c1")["e1"].cpu == 6000
    assert lm.scale_application("c1", "a1", -5) == 1


def test_segment_failure_drops_instances_and_restore() -> None:
    lm = manager()
    active(lm)
    lm.deploy_application("c1", app([comp("x")]), W)
    assert lm.fail_segment("e1") == [("c1", "a1", "x")]
    assert lm.deployment("c1", "a1").ready_count("x") == 0
    lm.broker.set_online("e1", False)
    report = lm.restore_component("c1", "a1", "x", "e2")
    assert report.source is None


def test_quota_isolation_between_continuums() -> None:
    lm = manager()
    active(lm, "c1", (("e1", RV(1000, 2048, 10, 100)),))
    active(lm, "c2", (("e1", Q),))
    with pytest.raises(Infeasible):
        lm.deploy_application("c1", app([comp("x", cpu=2000)]), W)
    lm.deploy_application("c2", app([comp("x", cpu=2000)]), W)
    assert lm.used("c1") == {}


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_random_lifecycle_walks_stay_legal(seed: int) -> None:
    stats = lifecycle_walk(300, seed)
    assert stats.checks == 300


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_random_broker_walks_conserve(seed: int) -> None:
    assert broker_walk(300, seed).checks == 300
