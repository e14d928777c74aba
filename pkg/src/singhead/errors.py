"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SingHeadError(Exception):
    exit_code = 1


class ValidationError(SingHeadError, ValueError):
    """Bad shapes, out-of-range values, inconsistent inputs."""

    exit_code = 3


class DataError(SingHeadError):
    """Unreadable or inconsistent input data."""

    exit_code = 3


class FormatError(DataError):
    code = "format"


class ManifestError(FormatError):
    code = "corrupt-manifest"


class TruncatedError(FormatError):
    code = "truncated"


class DimensionMismatchError(FormatError):
    code = "dim-mismatch"


class DivergenceError(SingHeadError):
    """Optimization produced NaN/Inf or failed to decrease the objective."""

    exit_code = 4

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class UsageError(SingHeadError):
    """Missing or contradictory command-line flags."""

    exit_code = 2
