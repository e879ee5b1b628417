"""Exception hierarchy shared by every module."""

from __future__ import annotations


class ExtControlError(Exception):
    """Base class for all errors raised by the package."""


# estimand
class MissingAttribute(ExtControlError, ValueError):
    def __init__(self, name: str):
        super().__init__(f"estimand attribute {name!r} is empty")
        self.name = name


class DuplicateIceStrategy(ExtControlError, ValueError):
    def __init__(self, event: str):
        super().__init__(f"intercurrent event {event!r} has more than one handling strategy")
        self.event = event


class MalformedPeriod(ExtControlError, ValueError):
    pass


# data
class SchemaMismatch(ExtControlError, ValueError):
    def __init__(self, column: str, detail: str = ""):
        msg = f"schema mismatch on {column!r}"
        super().__init__(f"{msg}: {detail}" if detail else msg)
        self.column = column


class ParseError(ExtControlError, ValueError):
    def __init__(self, row: int, column: str, value: object = None):
        super().__init__(f"row {row}: cannot parse column {column!r} (value {value!r})")
        self.row = row
        self.column = column


class MaskedOutcomeError(ExtControlError, LookupError):
    """Raised when reading Y of a record with delta == 0."""


# fitness
class UnknownColumn(ExtControlError, KeyError):
    def __init__(self, column: str):
        super().__init__(column)
        self.column = column

    def __str__(self) -> str:
        return f"unknown column {self.column!r}"


class NoRules(ExtControlError, ValueError):
    pass


# controls
class MissingIndexDate(ExtControlError, ValueError):
    def __init__(self, subject_id: str):
        super().__init__(f"subject {subject_id!r} has no index date")
        self.subject_id = subject_id


class DimensionMismatch(ExtControlError, ValueError):
    pass


class NoSources(ExtControlError, ValueError):
    pass


class InsufficientData(ExtControlError, ValueError):
    pass


class InvalidCounts(ExtControlError, ValueError):
    pass


class EmptyTreatedArm(ExtControlError, ValueError):
    pass


# estimators
class ModelFitError(ExtControlError, RuntimeError):
    pass


class PerfectSeparation(ModelFitError):
    pass


class SingleArmSample(ExtControlError, ValueError):
    pass


class PositivityViolation(ExtControlError, ValueError):
    pass


# sensitivity
class EmptyGrid(ExtControlError, ValueError):
    pass


class GridMissingZero(ExtControlError, ValueError):
    pass


class NonpositiveRatio(ExtControlError, ValueError):
    pass


class ZeroControlRate(ExtControlError, ValueError):
    pass


# simulate / cli
class InvalidConfig(ExtControlError, ValueError):
    pass


class NonBinaryOutcome(ExtControlError, ValueError):
    pass
