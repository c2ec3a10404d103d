"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called outside its documented preconditions."""


class DimensionError(ContractError):
    """Operand shapes do not conform."""


class FormatError(ValueError):
    """A serialized artifact is corrupt, truncated or of an unknown version."""


class DivergenceError(RuntimeError):
    """Training produced non-finite or exploding losses."""
