"""Command line entry point: ``aiora validate | plan place | sim run | sim summarize | serve``.

Exit codes: 0 ok, 2 validation error, 3 infeasible, 4 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from importlib import resources
from pathlib import Path
from typing import Any

from aiora.errors import (
    AioraError,
    Infeasible,
    MalformedTrace,
    ScenarioParseError,
    ScenarioValidationError,
    TopologyError,
)
from aiora.model import Topology, validate_topology
from aiora.placement import ApplicationDescriptor, ObjectiveWeights, place

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_INFEASIBLE = 3
EXIT_RUNTIME = 4

log = logging.getLogger("aiora")


def resolve_scenario(name: str) -> Path:
    """A path on disk, or the name of a bundled scenario such as ``reference``."""
    path = Path(name)
    if path.exists():
        return path
    stem = name[:-5] if name.endswith(".json") else name
    bundled = resources.files("aiora") / "scenarios" / f"{stem}.json"
    if bundled.is_file():
        return Path(str(bundled))
    return path


def _read_json(path: str) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ScenarioParseError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(f"{path}: invalid JSON: {exc}") from exc


def cmd_validate(args: argparse.Namespace) -> int:
    from aiora.sim.scenario import load_scenario

    path = resolve_scenario(args.file)
    data = _read_json(str(path))
    if isinstance(data, dict) and "segments" in data and "topology" not in data:
        report = validate_topology(Topology.from_dict(data))
        for w in report.warnings:
            print(f"warning: {w}")
        if not report.ok:
            raise ScenarioValidationError(list(report.violations))
        print(f"ok: topology with {len(data['segments'])} segments")
        return EXIT_OK
    cfg = load_scenario(path)
    print(
        f"ok: {len(cfg.topology.segments)} segments, {len(cfg.continuums)} continuums, "
        f"{len(cfg.applications)} applications, {len(cfg.loops)} loops, {len(cfg.events)} events, "
        f"horizon {cfg.horizon}"
    )
    return EXIT_OK


def cmd_place(args: argparse.Namespace) -> int:
    topo = Topology.from_dict(_read_json(args.topology))
    report = validate_topology(topo)
    if not report.ok:
        raise ScenarioValidationError(list(report.violations))
    try:
        app = ApplicationDescriptor.from_dict(_read_json(args.app))
        weights = ObjectiveWeights.from_dict(_read_json(args.weights) if args.weights else {"w_latency": 1.0})
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioValidationError([f"bad input: {exc}"]) from exc
    plan = place(topo, app, weights)
    out = plan.to_json()
    if args.out:
        Path(args.out).write_text(out + "\n", encoding="utf-8")
    else:
        print(out)
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    from aiora.sim.engine import Engine, write_trace
    from aiora.sim.metrics import write_metrics
    from aiora.sim.scenario import load_scenario

    cfg = load_scenario(resolve_scenario(args.scenario))
    overrides: dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.noise is not None:
        overrides["noise"] = args.noise
    if args.horizon is not None:
        overrides["horizon"] = args.horizon
    if overrides:
        from aiora.sim.scenario import validate_scenario

        cfg = cfg.with_overrides(**overrides)
        problems = validate_scenario(cfg)
        if problems:
            raise ScenarioValidationError(problems)
    trace, summary = Engine(cfg).run()
    write_trace(trace, args.out)
    if args.metrics:
        write_metrics(summary, args.metrics)
    log.info("wrote %d trace records to %s", len(trace), args.out)
    print(json.dumps(summary.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_summarize(args: argparse.Namespace) -> int:
    from aiora.sim.metrics import read_trace, summarize

    summary = summarize(read_trace(args.trace), args.tick_seconds)
    print(json.dumps(summary.to_dict(), sort_keys=True, indent=2))
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from aiora.api import create_app
    from aiora.sim.engine import Engine
    from aiora.sim.scenario import load_scenario

    engine = Engine(load_scenario(resolve_scenario(args.scenario)))
    for tick in range(args.warmup):
        engine.step(tick)
    uvicorn.run(create_app(engine), host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aiora", description="Edge-cloud continuum orchestration engine")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a scenario or topology file")
    v.add_argument("file")
    v.set_defaults(func=cmd_validate)

    plan = sub.add_parser("plan", help="placement planning")
    plan_sub = plan.add_subparsers(dest="plan_command", required=True)
    pl = plan_sub.add_parser("place", help="cheapest feasible placement of one application")
    pl.add_argument("--topology", required=True)
    pl.add_argument("--app", required=True)
    pl.add_argument("--weights")
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_place)

    sim = sub.add_parser("sim", help="simulation")
    sim_sub = sim.add_subparsers(dest="sim_command", required=True)
    r = sim_sub.add_parser("run", help="run a scenario and write its trace")
    r.add_argument("scenario")
    r.add_argument("--seed", type=int)
    r.add_argument("--noise", type=float, help="multiplicative telemetry noise amplitude in [0, 1)")
    r.add_argument("--horizon", type=int)
    r.add_argument("--out", required=True, help="trace file (JSON lines)")
    r.add_argument("--metrics", help="write the metrics summary here")
    r.set_defaults(func=cmd_run)
    s = sim_sub.add_parser("summarize", help="aggregate an existing trace")
    s.add_argument("trace")
    s.add_argument("--tick-seconds", type=float, default=1.0)
    s.set_defaults(func=cmd_summarize)

    sv = sub.add_parser("serve", help="serve the northbound API over a live engine")
    sv.add_argument("scenario")
    sv.add_argument("--port", type=int, default=8080)
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--warmup", type=int, default=1, help="ticks to simulate before serving")
    sv.set_defaults(func=cmd_serve)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ScenarioValidationError as exc:
        for v in exc.violations:
            print(f"error: {v}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ScenarioParseError, TopologyError, MalformedTrace) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Infeasible as exc:
        print(f"infeasible: {', '.join(exc.kinds) or 'no candidates'}", file=sys.stderr)
        for kind, detail in exc.blocking:
            print(f"  {kind}: {detail}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (AioraError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
