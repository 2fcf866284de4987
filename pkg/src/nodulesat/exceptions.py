"""Exception hierarchy shared by every subpackage."""


class NoduleSATError(Exception):
    """Base class for all package errors."""


class DimensionError(NoduleSATError, ValueError):
    """Operand shapes are incompatible."""


class NumericDomainError(NoduleSATError, ArithmeticError):
    """NaN or non-finite values where finite ones are required."""


class StateError(NoduleSATError, RuntimeError):
    """An object was used before the state it needs was populated."""


class ConfigurationError(NoduleSATError, ValueError):
    """Invalid hyperparameter or structural configuration."""


class EmptySetError(NoduleSATError, ValueError):
    """A bag must contain at least one instance."""


class ContractError(NoduleSATError, ValueError):
    """Caller violated a documented precondition."""


class UndefinedMetricError(NoduleSATError, ValueError):
    """The metric is not defined for the supplied data."""


class InclusionCriteriaError(NoduleSATError, ValueError):
    """An annotation does not satisfy the inclusion rule."""


class ParseError(NoduleSATError, ValueError):
    """Malformed file. ``offset`` is the byte (or line) position of the fault."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset
