"""Exception hierarchy shared across the package."""


class DefectscanError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DefectscanError):
    """A knob or config value violates its documented constraints."""


class ContractError(DefectscanError):
    """A call broke an operation's precondition."""


class DimensionError(ContractError):
    """Array shapes are incompatible; the message names the offending axes."""


class NumericsError(DefectscanError):
    """A computation produced non-finite values."""


class StateError(DefectscanError):
    """An object was used before reaching the required state (e.g. unfitted model)."""
