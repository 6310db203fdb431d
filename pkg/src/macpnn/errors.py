"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with arguments violating its preconditions."""


class NumericalError(FloatingPointError):
    """A forward/backward pass produced non-finite values."""


class ConfigurationError(ValueError):
    """A scenario or experiment configuration is invalid."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given counts (e.g. no points scored)."""
