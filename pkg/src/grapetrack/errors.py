"""Exception hierarchy shared by every module.

All of these map to exit code 2 in the command line tool.
"""


class GrapeTrackError(Exception):
    """Base class for input and validation failures."""


class ParseError(GrapeTrackError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(GrapeTrackError, ValueError):
    """Binary or text container is not what it claims to be."""


class ValidationError(GrapeTrackError, ValueError):
    """Well-formed input that violates a data invariant."""


class IntegrityError(ValidationError):
    """Broken cross references inside a sparse model."""


class ContractError(GrapeTrackError, RuntimeError):
    """A function was called with inputs violating its precondition."""


class AnnotationWarning(UserWarning):
    """Recoverable defect in annotation files (clamped values, overlaps, ...)."""
