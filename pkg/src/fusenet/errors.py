"""Exception hierarchy shared across the package."""


class FusenetError(Exception):
    """Base class for all package errors."""


class DataError(FusenetError):
    """Malformed or contract-violating input data."""


class ConfigError(FusenetError):
    """Invalid run configuration or parameter values."""


class NumericalError(FusenetError):
    """Solver failed to certify a solution within its iteration budget.

    Carries the last iterate and its optimality residual so callers can
    inspect how far the solve got.
    """

    def __init__(self, message, *, fit=None, residual=None):
        super().__init__(message)
        self.fit = fit
        self.residual = residual
