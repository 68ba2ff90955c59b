class SegotError(Exception):
    pass


class ValidationError(SegotError, ValueError):
    """Inputs violate a documented shape, range or consistency constraint."""


class FormatError(ValidationError):
    """A byte stream is not a well-formed SGT1 tensor."""


class NumericError(SegotError, ArithmeticError):
    """A computation produced non-finite values."""
