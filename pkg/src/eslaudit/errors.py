"""Exception hierarchy shared by every stage of an audit."""

from __future__ import annotations


class AuditError(Exception):
    """Base class for all audit failures."""


# dataset
class SchemaError(AuditError):
    """A declared column is missing or the column roles are inconsistent."""


class CardinalityError(AuditError):
    """A sensitive attribute does not have exactly two observed levels."""


class LabelError(AuditError):
    """The outcome column is not binary."""


class SplitError(AuditError):
    """A train/test split cannot be formed."""


# model
class DegenerateModelError(AuditError):
    """Training labels contain a single class."""

    def __init__(self, message: str, coalition: tuple[str, ...] | None = None):
        super().__init__(message)
        self.coalition = coalition


class ShapeError(AuditError):
    """Array lengths or column sets do not line up."""


class DomainError(AuditError):
    """An argument lies outside its allowed domain."""


class CompletenessError(AuditError):
    """A required feature coalition is absent from a prediction table."""


class PredictionValueError(AuditError):
    """A prediction is not 0 or 1."""


# metrics
class UndefinedMetricError(AuditError):
    """A metric has a zero denominator on the selected rows."""

    def __init__(self, kind, coalition=None, detail: str = ""):
        name = getattr(kind, "value", kind)
        msg = f"{name} undefined (zero denominator)"
        if coalition is not None:
            msg += f" for coalition {coalition}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.kind = kind
        self.coalition = coalition


# inference
class DegenerateVarianceError(AuditError):
    """A pooled proportion sits at 0 or 1 so the null variance vanishes."""


class UndefinedTestError(AuditError):
    """A test statistic cannot be formed (for example a zero group count)."""


class NumericalConsistencyError(AuditError):
    """An assembled variance is negative beyond rounding tolerance."""


class IncompleteCriterionError(AuditError):
    """A fairness criterion is missing one of its constituent tests."""


class IncompleteVoteError(AuditError):
    """Majority voting did not receive all five families."""


# bootstrap
class StratumError(AuditError):
    """A resampling stratum is empty."""


class UnstableResultError(AuditError):
    """Too many bootstrap replicates failed."""

    def __init__(self, message: str, failures: int = 0):
        super().__init__(message)
        self.failures = failures
