"""Exception types shared across the toolkit."""


class ValidationError(ValueError):
    """Raised when data violates a structural contract (shapes, ranges, ids)."""


class ConfigurationError(ValueError):
    """Raised when a run configuration is incomplete or inconsistent."""


class NumericError(RuntimeError):
    """Raised when training produces a non-finite loss or gradient."""
