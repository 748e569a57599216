"""Exception types shared across the package."""


class AbrdfError(Exception):
    """Base class for all library errors."""


class ConfigurationError(AbrdfError, ValueError):
    """Shapes, layouts or options that do not fit together."""


class NumericError(AbrdfError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class DomainError(AbrdfError, ValueError):
    """An argument outside the domain of an operation."""


class UsageError(AbrdfError, RuntimeError):
    """API misuse, e.g. sweeping a tape twice."""


class DatasetError(AbrdfError, OSError):
    """Missing or inconsistent files in a dataset directory."""
