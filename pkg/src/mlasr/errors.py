"""Exception types shared across the toolkit.

The CLI maps these onto process exit codes: ``DataError`` -> 2,
``NumericalError`` -> 3.  Anything else that escapes is a bug.
"""


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class NumericalError(ArithmeticError):
    """Non-finite values or divergence during computation."""
