from aiora.sim.engine import Engine, TraceRecord, run, write_trace
from aiora.sim.metrics import MetricsSummary, read_trace, summarize, write_metrics
from aiora.sim.scenario import (
    AppConfig,
    Event,
    EventKind,
    ScenarioConfig,
    load_scenario,
    load_scenario_dict,
    validate_scenario,
)

__all__ = [
    "AppConfig",
    "Engine",
    "Event",
    "EventKind",
    "MetricsSummary",
    "ScenarioConfig",
    "TraceRecord",
    "load_scenario",
    "load_scenario_dict",
    "read_trace",
    "run",
    "summarize",
    "validate_scenario",
    "write_metrics",
    "write_trace",
]
