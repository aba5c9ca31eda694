"""Exception types shared across the package."""


class DataError(ValueError):
    """Malformed or inconsistent input data (bad file, duplicate keys, ...)."""


class SupportError(DataError):
    """An observed value lies outside the support of its declared family.

    Distinct from a missing value, which is always legal.
    """


class ConfigError(ValueError):
    """Invalid model or run configuration."""


class EstimationError(RuntimeError):
    """Optimization could not produce a usable result."""


class NumericalError(RuntimeError):
    """A numerical computation produced non-finite or degenerate output."""
