"""Exception hierarchy. Each class carries the CLI exit status it maps to."""


class SkyrankError(Exception):
    exit_code = 1


class ValidationError(SkyrankError, ValueError):
    """Bad configuration or arguments."""

    exit_code = 2


class DataError(SkyrankError, ValueError):
    """Malformed or inconsistent data (files, ids, shapes)."""

    exit_code = 3


class DimensionMismatchError(DataError):
    pass


class DegenerateInputError(DataError):
    """Input with no direction, e.g. an all-zero vector."""


class NumericError(SkyrankError, ArithmeticError):
    """Non-finite value produced or consumed by a numeric routine."""

    exit_code = 4
