"""Exception types shared across the package."""


class DataError(ValueError):
    """Invalid domain data (bad shapes, empty masks, grid mismatches)."""


class GridMismatchError(DataError):
    """Operands live on different grids."""


class EmptyMaskError(DataError):
    """An operation that needs a nonempty mask received an empty one."""


class FileFormatError(DataError):
    """A volume file could not be parsed. Carries a short error code."""

    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


class NumericalAbortError(RuntimeError):
    """Optimization produced a non-finite loss; names the offending term."""

    def __init__(self, term, message=None):
        super().__init__(message or f"non-finite value in loss term '{term}'")
        self.term = term
