"""Exception hierarchy shared across the package."""


class StagewiseError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(StagewiseError):
    """Tensor shapes are inconsistent with the operation's contract."""


class ConfigError(StagewiseError):
    """A configuration value is invalid (bad hyperparameter, bad plan, ...)."""


class ContractError(StagewiseError):
    """An API precondition was violated by the caller."""
