"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand extents do not agree."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class NumericError(FloatingPointError):
    """NaN or Inf showed up where finite values are required."""
