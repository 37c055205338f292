"""Error vocabulary shared by every tool module and the harness."""

from typing import Optional


class MetaDAError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(MetaDAError, ValueError):
    """A caller broke an operation's precondition (shape, range, emptiness...)."""


class NumericFailure(MetaDAError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""

    def __init__(self, message: str, where: Optional[str] = None):
        self.where = where
        super().__init__(f"{message} [{where}]" if where else message)


class OracleRefused(ContractViolation):
    """The finite-difference oracle was asked to run on too large a model."""
