"""Exception types shared across the package."""


class SasrError(Exception):
    """Base class for all errors raised by sasrnet."""


class ShapeError(SasrError, ValueError):
    """Operand shapes are incompatible for an operation."""


class ContractError(SasrError, ValueError):
    """A precondition of an operation was violated."""


class FormatError(SasrError):
    """A file does not follow the expected binary layout."""


class CorruptionError(FormatError):
    """A file is structurally valid but its payload is truncated or damaged."""


class NumericAbort(SasrError, ArithmeticError):
    """A loss term or gradient became non-finite during training."""

    def __init__(self, message, term=None, step=None):
        super().__init__(message)
        self.term = term
        self.step = step
