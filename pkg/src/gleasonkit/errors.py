"""Exception hierarchy shared across the package."""


class GleasonKitError(Exception):
    """Base class for all package errors."""


class ValidationError(GleasonKitError, ValueError):
    """Input failed a schema or domain check (CLI exit code 2)."""


class UndefinedMetricError(GleasonKitError, ValueError):
    """A statistic is undefined for the given data (e.g. zero denominator)."""


class DegenerateError(UndefinedMetricError):
    """Agreement or regression problem is degenerate (single category, no variance)."""


class ConvergenceError(GleasonKitError, RuntimeError):
    """Numerical fit failed to converge (CLI exit code 3)."""


class StageError(GleasonKitError):
    """Pipeline stage failed; message carries the stage tag."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")
