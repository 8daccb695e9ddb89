"""Exception hierarchy. CLI exit codes are attached to each family."""


class MkidQubitError(Exception):
    exit_code = 1


class ConfigError(MkidQubitError):
    """Invalid geometry, run configuration or parameter block."""

    exit_code = 2


class DataError(MkidQubitError):
    """Malformed, missing or mismatched input data."""

    exit_code = 3


class CalibrationError(DataError):
    pass


class DomainError(ValueError):
    """Argument outside the domain of a physical model (e.g. T below base)."""


class EstimationError(MkidQubitError):
    """A fit or estimator could not produce a result."""

    exit_code = 4

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class FitError(EstimationError):
    pass


class CaptureOverflowError(MkidQubitError):
    """Downstream capture consumer fell behind the bounded spill."""

    exit_code = 3
