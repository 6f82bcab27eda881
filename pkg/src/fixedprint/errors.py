"""Exception taxonomy shared across the toolkit.

All library errors derive from FixedPrintError so callers can catch one
base. The CLI maps ValidationError/FormatError subclasses to exit code 3
and everything else unexpected to 4.
"""


class FixedPrintError(Exception):
    """Base class for every error raised by this package."""


class DomainError(FixedPrintError, ValueError):
    """A scalar input is outside its mathematical domain (non-finite, wrong sign)."""


class ValidationError(FixedPrintError, ValueError):
    """A structural invariant on a value or argument combination is violated."""


class FormatError(FixedPrintError, ValueError):
    """A serialized payload is malformed (bad magic, version, length, or field)."""


class DegenerateEmbeddingError(ValidationError):
    """Both branch embeddings are zero; no unit-norm template exists."""


class UnsupportedFarLevelError(ValidationError):
    """Requested FAR level is below 1/|imposter scores| and cannot be estimated."""


class TrainingDivergedError(FixedPrintError, RuntimeError):
    """Training produced a non-finite loss."""
