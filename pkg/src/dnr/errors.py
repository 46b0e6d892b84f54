"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments outside its contract."""


class NumericFault(ArithmeticError):
    """A NaN or infinity appeared where a finite value is required."""
