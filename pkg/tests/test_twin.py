from __future__ import annotations

import json

import pytest
from builders import RV, link, seg, topo
from hypothesis import given, settings
from hypothesis import strategies as st

from aiora.errors import MissingMetric, OutOfOrderTelemetry, UnknownEntity
from aiora.loops import Action, ActuationProposal
from aiora.twin import (
    AppStructure,
    DigitalTwin,
    Inventory,
    Provenance,
    SegmentStatus,
    TelemetryRecord,
    TwinSnapshot,
    what_if,
)


def net():
    return topo(
        [seg("a", idle=100, peak=300, carbon=400.0, cap=RV(4000, 8192, 100, 1000)), seg("b", idle=50, peak=150)],
        [link("a", "b", 5.0)],
        {"z1": {"a": 2.0}, "z2": {"b": 1.0}},
    )


def rec(tick, source, metric, value) -> TelemetryRecord:
    return TelemetryRecord(tick, source, metric, value)


def twin_with_app(util_a: float = 0.5) -> tuple[DigitalTwin, TwinSnapshot]:
    tw = DigitalTwin(net())
    tw.observe_inventory(
        Inventory(
            residuals={"a": RV(1000, 0, 0, 0), "b": RV(16000, 0, 0, 0)},
            free_quota={"c1": {"a": RV(1000, 0, 0, 0)}},
            apps={"a1": AppStructure("c1", "z1", 1, {"x": "a"}, {"x": RV(2000, 0, 0, 0)}, ("x",))},
        )
    )
    tw.ingest([rec(0, "a", "cpu_utilization", util_a), rec(0, "a1", "latency_ms", 2.0), rec(0, "a1", "utilization", 0.6)])
    return tw, tw.snapshot(0)


def test_ingest_then_snapshot() -> None:
    tw = DigitalTwin(net())
    tw.ingest([rec(1, "a", "cpu_utilization", 0.5)])
    snap = tw.snapshot(1)
    assert snap.utilization["a"] == 0.5
    assert snap.provenance["a/cpu_utilization"] is Provenance.LOCAL


def test_same_key_last_write_wins() -> None:
    tw = DigitalTwin(net())
    tw.ingest([rec(1, "a", "cpu_utilization", 0.2), rec(1, "a", "cpu_utilization", 0.7)])
    assert tw.snapshot(1).utilization["a"] == 0.7


def test_regressing_tick_rejected_atomically() -> None:
    tw = DigitalTwin(net())
    tw.ingest([rec(5, "a", "cpu_utilization", 0.1)])
    with pytest.raises(OutOfOrderTelemetry):
        tw.ingest([rec(6, "b", "cpu_utilization", 0.9), rec(4, "a", "cpu_utilization", 0.9)])
    assert tw.snapshot(6).utilization["b"] == 0.0


def test_empty_twin_is_idle() -> None:
    snap = DigitalTwin(net()).snapshot(0)
    assert snap.utilization == {"a": 0.0, "b": 0.0}
    assert snap.power_w == {"a": 100.0, "b": 50.0}


def test_power_and_carbon_from_utilization() -> None:
    tw = DigitalTwin(net())
    tw.ingest([rec(0, "a", "cpu_utilization", 0.25)])
    snap = tw.snapshot(0)
    assert snap.power_w["a"] == 150.0
    assert snap.carbon_g_per_h["a"] == pytest.approx(60.0)


def test_status_and_failed_power() -> None:
    tw = DigitalTwin(net())
    tw.ingest([rec(0, "a", "failed", 1.0), rec(0, "b", "online", 0.0)])
    snap = tw.snapshot(0)
    assert snap.status["a"] is SegmentStatus.FAILED and snap.power_w["a"] == 0.0
    assert snap.status["b"] is SegmentStatus.MAINTENANCE


def test_snapshot_reads_history_as_of_tick() -> None:
    tw = DigitalTwin(net())
    tw.ingest([rec(1, "a", "cpu_utilization", 0.1)])
    tw.ingest([rec(3, "a", "cpu_utilization", 0.3)])
    assert tw.snapshot(0).utilization["a"] == 0.0
    assert tw.snapshot(2).utilization["a"] == 0.1
    assert tw.snapshot(9).utilization["a"] == 0.3


def test_issued_snapshot_is_immutable() -> None:
    tw = DigitalTwin(net())
    tw.ingest([rec(1, "a", "cpu_utilization", 0.1)])
    snap = tw.snapshot(1)
    before = snap.to_dict()
    tw.ingest([rec(1, "a", "cpu_utilization", 0.9), rec(2, "a", "cpu_utilization", 0.8)])
    assert snap.to_dict() == before
    with pytest.raises(TypeError):
        snap.utilization["a"] = 1.0  # type: ignore[index]


def test_external_import_is_tagged(tmp_path) -> None:
    path = tmp_path / "ext.jsonl"
    path.write_text("\n".join(json.dumps(rec(2, "b", "cpu_utilization", 0.4).to_dict()) for _ in range(2)))
    tw = DigitalTwin(net())
    assert tw.import_external(str(path)) == 2
    assert tw.snapshot(2).provenance["b/cpu_utilization"] is Provenance.EXTERNAL_TWIN


def test_metric_selectors() -> None:
    _, snap = twin_with_app()
    assert snap.metric("segment:a:cpu_utilization") == 0.5
    assert snap.metric("app:a1:latency_ms") == 2.0
    for bad in ("segment:zz:cpu_utilization", "app:a1:nothing", "oops", "host:a:x"):
        with pytest.raises(MissingMetric):
            snap.metric(bad)


def test_snapshot_round_trip() -> None:
    _, snap = twin_with_app()
    assert TwinSnapshot.from_dict(snap.to_dict()).to_dict() == snap.to_dict()


def proposal(action: Action, target: str = "app:a1") -> ActuationProposal:
    return ActuationProposal("p@0", "p", target, action)


def test_what_if_noop_is_identity() -> None:
    _, snap = twin_with_app()
    before = snap.to_dict()
    assert what_if(net(), snap, proposal(Action.reconfigure("k", 1))) == snap
    assert snap.to_dict() == before


def test_what_if_migrate_predicts_latency() -> None:
    _, snap = twin_with_app()
    # zone z1 reaches b through a: 2 ms access + 5 ms link
    out = what_if(net(), snap, proposal(Action.migrate("x", "b")))
    assert out.apps["a1"].latency_ms == 7.0
    assert out.apps["a1"].placement == {"x": "b"}
    assert out.utilization["a"] == pytest.approx(0.0)
    assert snap.apps["a1"].placement == {"x": "a"}


def test_what_if_scale_up_saturates() -> None:
    _, snap = twin_with_app(util_a=0.9)
    out = what_if(net(), snap, proposal(Action.scale_up(1)))
    assert out.utilization["a"] == 1.0 and "a" in out.saturated
    assert out.power_w["a"] == 300.0
    assert out.apps["a1"].replicas == 2


def test_what_if_unknown_app() -> None:
    _, snap = twin_with_app()
    with pytest.raises(UnknownEntity):
        what_if(net(), snap, proposal(Action.scale_up(1), "app:ghost"))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["a", "b"]), st.floats(0, 1)), max_size=20))
def test_snapshot_values_stay_in_range(values) -> None:
    tw = DigitalTwin(net())
    for t, (sid, u) in enumerate(values):
        tw.ingest([rec(t, sid, "cpu_utilization", u)])
        snap = tw.snapshot(t)
        assert all(0.0 <= x <= 1.0 for x in snap.utilization.values())
        assert snap.utilization[sid] == u
