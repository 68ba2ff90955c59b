"""Wide-baseline segment matching with a dustbin-augmented optimal-transport layer."""

from segot.errors import FormatError, NumericError, SegotError, ValidationError

__version__ = "0.1.0"

__all__ = ["FormatError", "NumericError", "SegotError", "ValidationError", "__version__"]
