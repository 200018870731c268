"""Exception hierarchy shared across the package.

Callers that need a broad net can catch ValidationError (bad inputs or
configuration) separately from NumericalError (computation went bad on
inputs that looked fine).
"""


class ValidationError(ValueError):
    """Input, shape, or configuration violates a documented precondition."""


class DataError(ValidationError):
    """A file or stream is malformed: bad magic, truncation, out-of-range labels."""


class ConfigError(ValidationError):
    """A run configuration is structurally invalid or has unknown keys."""


class NumericalError(ArithmeticError):
    """An iterative or conditioning-sensitive computation failed."""


class DivergenceError(NumericalError):
    """Training produced a non-finite loss; the run was aborted."""
