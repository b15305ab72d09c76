"""Exception hierarchy shared by every module."""

from __future__ import annotations


class TransductError(Exception):
    """Base class for all library errors."""


class SlotConflict(TransductError):
    pass


class UnknownSlot(TransductError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return Exception.__str__(self)


class TypeMismatch(TransductError):
    pass


class ShapeMismatch(TransductError):
    pass


class OverlapError(TransductError):
    pass


class ValidationError(TransductError, ValueError):
    """Raised when a record does not conform to a schema.

    ``issues`` holds one ``(slot path, reason)`` pair per offending slot.
    """

    def __init__(self, issues: list[tuple[str, str]], line: int | None = None):
        self.issues = list(issues)
        self.line = line
        detail = "; ".join(f"{path}: {reason}" for path, reason in self.issues)
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + detail)


class MalformedOutput(TransductError):
    pass


class UnresolvedPlaceholder(TransductError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class EmptyTargetExample(TransductError):
    pass


class InferenceAmbiguous(TransductError):
    pass


class ConfigError(TransductError):
    pass


# Backend failures. All of them are retryable.
class BackendError(TransductError):
    retryable = True


class Timeout(BackendError):
    pass


class RateLimited(BackendError):
    pass


class TransportError(BackendError):
    pass


class FaultInjected(BackendError):
    pass


# Dataflow
class ItemError(TransductError):
    def __init__(self, index: int, cause: BaseException):
        self.index = index
        self.cause = cause
        super().__init__(f"item {index}: {cause!r}")


class ReduceError(TransductError):
    pass


class NonConvergence(TransductError):
    pass


class StageError(TransductError):
    def __init__(self, stage: int, cause: BaseException | str):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage}: {cause}")


# Prompt optimization
class GenerationFailed(TransductError):
    def __init__(self, message: str, trajectory: list[float] | None = None):
        self.trajectory = list(trajectory or [])
        super().__init__(message)


class UnscoredCandidate(TransductError):
    pass
