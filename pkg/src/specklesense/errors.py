"""Exception hierarchy.

Every error carries an ``exit_code`` so the command-line front end can map
failures onto process exit statuses without a lookup table.
"""


class SpeckleError(Exception):
    exit_code = 1


class ConfigurationError(SpeckleError, ValueError):
    exit_code = 2


class DomainError(SpeckleError, ValueError):
    """A stimulus lies outside the bounds configured for the material."""

    exit_code = 3


class ShapeError(SpeckleError, ValueError):
    exit_code = 3


class DegenerateInputError(SpeckleError, ValueError):
    """Zero variance, zero range, or otherwise unusable numerical input."""

    exit_code = 3


class EmptyProtocolError(SpeckleError, ValueError):
    exit_code = 3


class CalibrationError(SpeckleError, RuntimeError):
    exit_code = 4

    def __init__(self, message, best_gains=None, achieved=None):
        super().__init__(message)
        self.best_gains = best_gains or {}
        self.achieved = achieved or {}


class DivergenceError(SpeckleError, FloatingPointError):
    exit_code = 4

    def __init__(self, epoch, loss):
        super().__init__(f"non-finite training loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


class InferenceModeError(SpeckleError, RuntimeError):
    exit_code = 3


class SampleError(SpeckleError):
    """Wraps a failure while generating one dataset sample."""

    exit_code = 3

    def __init__(self, index, cause):
        super().__init__(f"sample {index}: {cause}")
        self.index = index
        self.cause = cause


# Binary container errors.  Each subclass has a distinct ``code``.

class FormatError(SpeckleError):
    exit_code = 3
    code = "format"


class BadMagicError(FormatError):
    code = "bad-magic"


class VersionMismatchError(FormatError):
    code = "version-mismatch"


class TruncatedError(FormatError):
    code = "truncated"


class ChecksumError(FormatError):
    code = "checksum"
