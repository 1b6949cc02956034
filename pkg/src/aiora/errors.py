"""Exception hierarchy shared by every orchestration module."""

from __future__ import annotations


class AioraError(Exception):
    """Base class for all orchestration errors."""


class UnknownSegment(AioraError, KeyError):
    def __init__(self, segment_id: str) -> None:
        super().__init__(f"unknown segment {segment_id}")
        self.segment_id = segment_id

    def __str__(self) -> str:
        return self.args[0]


class UtilizationOutOfRange(AioraError, ValueError):
    pass


class TopologyError(AioraError, ValueError):
    """Raised when a topology document cannot be parsed into a Topology."""


# resource broker
class DuplicateSegment(AioraError):
    pass


class SegmentBusy(AioraError):
    pass


class InsufficientCapacity(AioraError):
    pass


class AgreementExceeded(AioraError):
    pass


class UnknownReservation(AioraError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class AlreadyReleased(AioraError):
    pass


# placement
class UnknownComponent(AioraError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class ConstraintViolation(AioraError):
    """A scored assignment breaks at least one hard constraint.

    ``violations`` is a list of ``(kind, detail)`` tuples; ``kind`` is the
    first violated constraint kind.
    """

    def __init__(self, violations: list[tuple[str, str]]) -> None:
        self.violations = list(violations)
        self.kind = self.violations[0][0] if self.violations else "unknown"
        super().__init__("; ".join(f"{k}: {d}" for k, d in self.violations))


class Infeasible(AioraError):
    """No assignment satisfies the constraints.

    ``blocking`` lists ``(constraint kind, detail)`` pairs so callers can
    start a quality negotiation.
    """

    def __init__(self, blocking: list[tuple[str, str]], message: str | None = None) -> None:
        self.blocking = list(blocking)
        kinds = sorted({k for k, _ in self.blocking})
        super().__init__(message or f"infeasible ({', '.join(kinds) or 'no candidates'})")

    @property
    def kinds(self) -> list[str]:
        return sorted({k for k, _ in self.blocking})


# lifecycle
class UnauthorizedScenario(AioraError):
    pass


class IllegalTransition(AioraError):
    pass


class PlanesIncomplete(AioraError):
    pass


class ContinuumNotActive(AioraError):
    pass


class UnknownContinuum(AioraError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class UnknownApplication(AioraError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class MigrationInProgress(AioraError):
    pass


# closed loops
class UnknownAnalyzer(AioraError):
    pass


class UnknownPolicy(AioraError):
    pass


class CyclicNesting(AioraError):
    pass


class ScopeViolation(AioraError):
    pass


class MissingMetric(AioraError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class BadParams(AioraError, ValueError):
    pass


# coordination
class NoLadderDeclared(AioraError):
    pass


# digital twin
class OutOfOrderTelemetry(AioraError):
    pass


class UnknownEntity(AioraError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


# exposure
class Unauthorized(AioraError):
    def __init__(self, reason: str) -> None:
        super().__init__(reason)
        self.reason = reason


class UnknownEES(AioraError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class UnknownZone(AioraError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


# simulation
class ScenarioParseError(AioraError):
    pass


class ScenarioValidationError(AioraError):
    def __init__(self, violations: list[str]) -> None:
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class MalformedTrace(AioraError):
    pass
