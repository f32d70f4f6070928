"""Exception types raised across the package."""


class GPatcherError(Exception):
    """Base class; the CLI maps subclasses to distinct exit codes."""

    exit_code = 2


class DimensionTooLarge(GPatcherError):
    exit_code = 3


class InvalidBand(GPatcherError, ValueError):
    exit_code = 4


class DegenerateBound(GPatcherError):
    exit_code = 5


class EmptyIndexSet(GPatcherError):
    exit_code = 5


class NoConvergence(GPatcherError):
    exit_code = 6

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class ShapeMismatch(GPatcherError, ValueError):
    exit_code = 7


class EmptyMask(GPatcherError, ValueError):
    exit_code = 8


class ParseError(GPatcherError):
    exit_code = 9


class ManifestMismatch(GPatcherError):
    exit_code = 10


class InfeasibleSpec(GPatcherError, ValueError):
    exit_code = 11
