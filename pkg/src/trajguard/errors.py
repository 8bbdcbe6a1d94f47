"""Exception types raised across the package."""


class TrajGuardError(Exception):
    """Base class for all package errors."""


class ParseError(TrajGuardError, ValueError):
    """A line of an input file could not be parsed."""

    def __init__(self, message, line=None, source=None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class UnsupportedModelError(ParseError):
    pass


class ValidationError(TrajGuardError, ValueError):
    pass


class InsufficientDataError(TrajGuardError, ValueError):
    pass


class InsufficientMatchesError(InsufficientDataError):
    pass


class DegenerateGeometryError(TrajGuardError, ValueError):
    pass


class RetryExhaustedError(TrajGuardError, RuntimeError):
    pass


class WindowInfeasibleError(TrajGuardError, ValueError):
    pass


class MissingPoseError(TrajGuardError, KeyError):
    pass


class ShapeError(TrajGuardError, ValueError):
    pass


class EmptyMemoryError(TrajGuardError, ValueError):
    pass


class NoValidMemoryError(TrajGuardError, ValueError):
    pass


class AlignmentError(TrajGuardError, ValueError):
    pass


class UndefinedMetricError(TrajGuardError, ValueError):
    pass


class ConsistencyError(TrajGuardError, RuntimeError):
    """Internal inputs disagree with each other (e.g. flag lengths)."""


class ConfigError(TrajGuardError, ValueError):
    pass


class QuaternionDriftWarning(UserWarning):
    """An input quaternion was noticeably off the unit sphere before normalization."""


class UnsortedInputWarning(UserWarning):
    pass
