from __future__ import annotations

import json
import subprocess
import sys

from builders import app, comp, edge_cloud
from test_sim import SCENARIOS, minimal

from aiora.cli import EXIT_INFEASIBLE, EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, main


def write(path, data) -> str:
    path.write_text(json.dumps(data))
    return str(path)


def test_validate_bundled_and_by_name(capsys) -> None:
    assert main(["validate", str(SCENARIOS / "reference.json")]) == EXIT_OK
    assert main(["validate", "mobility"]) == EXIT_OK
    assert capsys.readouterr().out.startswith("ok:")


def test_validate_topology_file(tmp_path, capsys) -> None:
    assert main(["validate", write(tmp_path / "t.json", edge_cloud().to_dict())]) == EXIT_OK
    assert "3 segments" in capsys.readouterr().out


def test_validation_errors_exit_2(tmp_path, capsys) -> None:
    data = minimal()
    data["events"] = [{"tick": 3, "kind": "SegmentFailure", "segment": "ghost"}]
    assert main(["validate", write(tmp_path / "s.json", data)]) == EXIT_VALIDATION
    assert "ghost" in capsys.readouterr().err
    (tmp_path / "bad.json").write_text("{")
    assert main(["validate", str(tmp_path / "bad.json")]) == EXIT_VALIDATION
    assert main(["validate", str(tmp_path / "absent.json")]) == EXIT_VALIDATION
    out = str(tmp_path / "t.jsonl")
    assert main(["sim", "run", "mobility", "--noise", "2", "--out", out]) == EXIT_VALIDATION


def test_plan_place(tmp_path, capsys) -> None:
    topo_path = write(tmp_path / "t.json", edge_cloud().to_dict())
    app_path = write(tmp_path / "a.json", app([comp("x")]).to_dict())
    assert main(["plan", "place", "--topology", topo_path, "--app", app_path]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["assignment"] == {"x": "ran1"}


def test_infeasible_exits_3(tmp_path, capsys) -> None:
    topo_path = write(tmp_path / "t.json", edge_cloud().to_dict())
    app_path = write(tmp_path / "a.json", app([comp("x")], max_latency=1.0).to_dict())
    assert main(["plan", "place", "--topology", topo_path, "--app", app_path]) == EXIT_INFEASIBLE
    assert "latency" in capsys.readouterr().err


def test_runtime_error_exits_4(tmp_path) -> None:
    # the trace path is a directory, so writing it fails at run time
    scenario = write(tmp_path / "s.json", minimal())
    assert main(["sim", "run", scenario, "--out", str(tmp_path)]) == EXIT_RUNTIME


def test_sim_run_and_summarize(tmp_path, capsys) -> None:
    trace, metrics = tmp_path / "t.jsonl", tmp_path / "m.json"
    assert main(["sim", "run", "mobility", "--seed", "3", "--out", str(trace), "--metrics", str(metrics)]) == EXIT_OK
    printed = json.loads(capsys.readouterr().out)
    assert json.loads(metrics.read_text()) == printed
    assert main(["sim", "summarize", str(trace)]) == EXIT_OK
    assert json.loads(capsys.readouterr().out) == printed
    trace.write_text('{"seq": 1, "tick": 0, "kind": "kpi", "payload": {}}\n{"seq": 0}\n')
    assert main(["sim", "summarize", str(trace)]) == EXIT_VALIDATION


def test_seeded_runs_are_byte_identical(tmp_path) -> None:
    a, b, c = (tmp_path / n for n in ("a.jsonl", "b.jsonl", "c.jsonl"))
    for out, seed in ((a, "42"), (b, "42"), (c, "43")):
        assert main(["sim", "run", "reference", "--seed", seed, "--noise", "0.05", "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes() != c.read_bytes()


def test_console_entry_point(tmp_path) -> None:
    r = subprocess.run([sys.executable, "-m", "aiora.cli", "validate", "reference"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("ok:")
