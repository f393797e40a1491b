"""
Domain exceptions.

Every error raised by the toolkit derives from ``IllusionError`` and from the
closest builtin, so callers can catch either family.
"""
from typing import Sequence


class IllusionError(Exception):
    """Base class for toolkit errors."""


class ShapeMismatchError(IllusionError, ValueError):
    """Operand shapes do not conform for the requested operation."""

    def __init__(self, op: str, left: Sequence[int], right: Sequence[int]):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        super().__init__(f"{op}: shape mismatch {self.left} vs {self.right}")


class ZeroNormError(IllusionError, ValueError):
    """A vector with norm below 1e-12 cannot be normalized."""


class TapeError(IllusionError, RuntimeError):
    """Misuse of a differentiation tape (consumed tape, non-scalar root...)."""


class GradCheckError(IllusionError, ValueError):
    """Finite-difference probe could not be evaluated."""


class InvalidConfigError(IllusionError, ValueError):
    """A configuration value is outside its documented range."""


class UnsupportedModalityError(IllusionError, ValueError):
    """The modality is not handled by the encoder or the operation."""


class EmptyInputError(IllusionError, ValueError):
    """An operation received an empty collection it cannot aggregate."""


class OracleError(IllusionError, RuntimeError):
    """A query oracle failed to return an embedding."""


class CheckpointFormatError(IllusionError, ValueError):
    """A checkpoint file is truncated, corrupted or of an unknown version."""


class ReportIOError(IllusionError, OSError):
    """Reading or writing a report file failed."""

    def __init__(self, path: str, reason: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {reason}")
