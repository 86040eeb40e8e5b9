class DataError(ValueError):
    """Bad or inconsistent input data (files, masks, crops)."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where finite values are required."""
