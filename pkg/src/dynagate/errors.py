"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes violate an operation's contract."""


class ContractError(ValueError):
    """Argument outside its documented domain."""


class EmptyInputError(ValueError):
    """Operation requires at least one element/instance."""


class CheckpointError(ValueError):
    """Malformed, incompatible, or wrong-version checkpoint."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class NonFiniteError(ArithmeticError):
    """A kernel produced NaN/Inf from finite inputs (debug check)."""


class UsageError(ValueError):
    """Bad command-line invocation or config field."""
