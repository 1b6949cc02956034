from __future__ import annotations

import random

import pytest
from builders import PARTIES, RV, seg
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import brute_force_distinct_fit

from aiora.broker import ANY_SEGMENT, ResourceBroker, SegmentFilter
from aiora.errors import (
    AgreementExceeded,
    AlreadyReleased,
    DuplicateSegment,
    InsufficientCapacity,
    SegmentBusy,
    UnknownReservation,
    UnknownSegment,
)
from aiora.model import SegmentKind

CAP = RV(4000, 8192, 100, 1000)


def broker(*segments) -> ResourceBroker:
    b = ResourceBroker(PARTIES)
    for s in segments:
        b.register_segment(s)
    return b


def test_fresh_segment_residual_is_capacity() -> None:
    b = broker(seg("a", cap=CAP))
    assert b.residual("a") == CAP
    with pytest.raises(DuplicateSegment):
        b.register_segment(seg("a", cap=CAP))


def test_deregister_paths() -> None:
    b = broker(seg("a", cap=CAP), seg("b", cap=CAP))
    b.deregister_segment("b")
    assert b.segment_ids() == ["a"]
    r = b.reserve("c1", "a", RV(1, 0, 0, 0))
    with pytest.raises(SegmentBusy):
        b.deregister_segment("a")
    b.release(r.id)
    b.deregister_segment("a")
    assert b.segment_ids() == []
    with pytest.raises(UnknownSegment):
        b.residual("a")


def test_feasibility_examples() -> None:
    b = broker(seg("a", cap=CAP), seg("b", cap=RV(1000, 1024, 10, 100)))
    assert b.query_feasibility([]).feasible
    report = b.query_feasibility([(ANY_SEGMENT, RV(5000, 0, 0, 0))])
    assert not report.feasible and report.blocking[0][0] == "capacity"
    # only a can take the big demand, so the small one must go to b
    ok = b.query_feasibility([(ANY_SEGMENT, RV(500, 0, 0, 0)), (ANY_SEGMENT, RV(3000, 0, 0, 0))])
    assert ok.feasible and ok.assignment == ("b", "a")
    none = b.query_feasibility([(SegmentFilter(kinds=frozenset({SegmentKind.CLOUD})), RV())])
    assert none.blocking[0][0] == "filter"


def test_feasibility_reports_disjointness() -> None:
    b = broker(seg("a", cap=CAP), seg("b", cap=RV(100, 0, 0, 0)))
    report = b.query_feasibility([(ANY_SEGMENT, RV(1000, 0, 0, 0)), (ANY_SEGMENT, RV(1000, 0, 0, 0))])
    assert not report.feasible and report.blocking[0][0] == "disjointness"


def test_offline_segments_hidden_from_feasibility() -> None:
    b = broker(seg("a", cap=CAP))
    b.set_online("a", False)
    assert not b.query_feasibility([(ANY_SEGMENT, RV())]).feasible
    assert b.residuals(online_only=True) == {}


def test_reserve_boundaries() -> None:
    b = broker(seg("a", cap=CAP))
    z = b.reserve("c1", "a", RV())
    assert z.state.value == "Held" and b.residual("a") == CAP
    b.reserve("c1", "a", CAP)
    assert b.residual("a") == RV()
    with pytest.raises(InsufficientCapacity):
        b.reserve("c1", "a", RV(1, 0, 0, 0))
    with pytest.raises(ValueError):
        b.reserve("c1", "a", RV(-1, 0, 0, 0))


def test_agreement_fraction_on_owner_fleet() -> None:
    # mno lets edgeco hold half of its fleet: 2000 of 4000 millicores
    b = broker(seg("r", owner="mno", cap=RV(4000, 0, 0, 0)))
    b.bind_continuum("c1", "edgeco")
    b.reserve("c1", "r", RV(2000, 0, 0, 0))
    with pytest.raises(AgreementExceeded):
        b.reserve("c1", "r", RV(1, 0, 0, 0))


def test_no_agreement_means_zero() -> None:
    b = broker(seg("e", owner="edgeco", cap=CAP))
    b.bind_continuum("c9", "mno")
    with pytest.raises(AgreementExceeded):
        b.reserve("c9", "e", RV(1, 0, 0, 0))
    b.bind_continuum("own", "edgeco")
    b.reserve("own", "e", CAP)


def test_release_restores_and_rejects_double() -> None:
    b = broker(seg("a", cap=CAP))
    r = b.reserve("c1", "a", RV(100, 200, 3, 4))
    b.release(r.id)
    assert b.residual("a") == CAP
    with pytest.raises(AlreadyReleased):
        b.release(r.id)
    with pytest.raises(UnknownReservation):
        b.release("r999999")


def test_utilization_report_tracks_held() -> None:
    b = broker(seg("a", cap=CAP))
    assert b.utilization_report()["a"].held == RV()
    b.reserve("c1", "a", RV(7, 0, 0, 0))
    u = b.utilization_report()["a"]
    assert u.held == RV(7, 0, 0, 0) and u.held + u.residual == u.capacity


def test_random_workload_matches_ledger_replay() -> None:
    rng = random.Random(5)
    b = broker(seg("a", cap=CAP), seg("b", cap=CAP, owner="mno"))
    b.bind_continuum("c1", "edgeco")
    b.bind_continuum("c2", "mno")
    ledger: dict[str, tuple[str, RV]] = {}
    for _ in range(100):
        if ledger and rng.random() < 0.4:
            rid = rng.choice(sorted(ledger))
            b.release(rid)
            del ledger[rid]
            continue
        sid = rng.choice(["a", "b"])
        amount = RV(rng.randrange(0, 900), rng.randrange(0, 900), rng.randrange(0, 10), rng.randrange(0, 90))
        try:
            r = b.reserve(rng.choice(["c1", "c2"]), sid, amount)
        except (InsufficientCapacity, AgreementExceeded):
            continue
        ledger[r.id] = (sid, amount)
    for sid in ("a", "b"):
        held = RV.total(a for s, a in ledger.values() if s == sid)
        assert b.residual(sid) == CAP - held
        assert b.utilization_report()[sid].held == held


def test_checkpoint_round_trip(tmp_path) -> None:
    b = broker(seg("a", cap=CAP), seg("r", owner="mno", cap=CAP))
    b.bind_continuum("c1", "edgeco")
    r1 = b.reserve("c1", "a", RV(10, 0, 0, 0))
    b.reserve("c1", "r", RV(20, 0, 0, 0))
    b.release(r1.id)
    path = tmp_path / "broker.json"
    b.save(path)
    again = ResourceBroker.load(path)
    assert again.to_dict() == b.to_dict()
    assert again.residual("r") == CAP - RV(20, 0, 0, 0)


# -- properties ------------------------------------------------------------------------
ops = st.lists(
    st.tuples(
        st.sampled_from(["reserve", "release"]),
        st.sampled_from(["c1", "c2", "c3"]),
        st.sampled_from(["a", "b", "r"]),
        st.integers(0, 3000),
        st.integers(0, 5000),
        st.integers(0, 1000),
    ),
    max_size=60,
)


@settings(max_examples=80, deadline=None)
@given(ops)
def test_conservation_and_agreements_hold(seq) -> None:
    b = broker(seg("a", cap=CAP), seg("b", cap=CAP), seg("r", owner="mno", cap=CAP))
    b.bind_continuum("c1", "edgeco")
    b.bind_continuum("c2", "mno")
    live: list[str] = []
    for op, cid, sid, cpu, mem, pick in seq:
        if op == "reserve":
            try:
                live.append(b.reserve(cid, sid, RV(cpu, mem, 0, 0)).id)
            except (InsufficientCapacity, AgreementExceeded):
                pass
        elif live:
            b.release(live.pop(pick % len(live)))
        for u in b.utilization_report().values():
            assert u.held + u.residual == u.capacity
            assert u.residual.is_nonnegative()
        for _, _, held, limit in b.agreement_usage():
            assert held <= limit


@settings(max_examples=80, deadline=None)
@given(
    st.lists(st.integers(0, 4000), min_size=1, max_size=6),
    st.lists(st.integers(0, 4000), max_size=5),
)
def test_feasibility_agrees_with_brute_force(caps, demands) -> None:
    b = broker(*(seg(f"s{i}", cap=RV(c, 0, 0, 0)) for i, c in enumerate(caps)))
    req = [(ANY_SEGMENT, RV(d, 0, 0, 0)) for d in demands]
    cands = [[f"s{i}" for i, c in enumerate(caps) if d <= c] for d in demands]
    expected = brute_force_distinct_fit([r for _, r in req], cands)
    report = b.query_feasibility(req)
    assert report.feasible == expected
    assert report.feasible == (not report.blocking)
    if report.feasible:
        assert len(set(report.assignment)) == len(demands)
        assert all(d <= b.residual(s).cpu for d, s in zip(demands, report.assignment))
