"""Exception types raised across the package.

Every error carries an ``exit_code`` used by the command-line front end.
"""


class SftError(Exception):
    """Base class for all package errors."""

    exit_code = 1


# -- input / geometry ------------------------------------------------------

class NonPositiveDepth(SftError, ValueError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class BadFacet(SftError, IndexError):
    pass


class BadWeights(SftError, ValueError):
    pass


class OutOfDomain(SftError, ValueError):
    pass


class InvalidMesh(SftError, ValueError):
    pass


class BadResolution(SftError, ValueError):
    pass


class ScheduleOutOfRange(SftError, IndexError):
    pass


class EmptyMatches(SftError, ValueError):
    pass


class LengthMismatch(SftError, ValueError):
    exit_code = 3


class ShapeMismatch(SftError, ValueError):
    exit_code = 3


class ArchitectureMismatch(SftError, ValueError):
    exit_code = 3


class ParseError(SftError, ValueError):
    exit_code = 2


class EmptyGrid(SftError, ValueError):
    exit_code = 2


class MissingFile(SftError, FileNotFoundError):
    exit_code = 6


# -- optimisation ----------------------------------------------------------

class NonFiniteGradient(SftError, FloatingPointError):
    exit_code = 4


class DidNotConverge(SftError, RuntimeError):
    exit_code = 4


class SingularSystem(SftError, RuntimeError):
    exit_code = 4


class Diverged(SftError, RuntimeError):
    exit_code = 5


class FrameFailure(SftError, RuntimeError):
    """Wraps an error raised while processing one frame of a sequence."""

    exit_code = 4

    def __init__(self, frame, cause):
        super().__init__(f"frame {frame}: {cause}")
        self.frame = frame
        self.cause = cause
        if isinstance(cause, SftError):
            self.exit_code = cause.exit_code
