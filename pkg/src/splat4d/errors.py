"""Exception types shared across the package.

Everything derives from Splat4dError so callers can catch the whole family.
The CLI maps these onto exit codes (see cli.py).
"""


class Splat4dError(Exception):
    pass


class InvalidParameterError(Splat4dError, ValueError):
    """A primitive, config, or argument failed validation."""


class DegenerateCovarianceError(Splat4dError, ValueError):
    """Temporal variance too small to condition on (sigma_tt below threshold)."""


class InvalidCameraError(Splat4dError, ValueError):
    """Camera failed validation (non-orthonormal rotation, bad plane order, ...)."""


class DataError(Splat4dError):
    """Bad input data: unreadable dataset, corrupt checkpoint, malformed image."""


class CorruptCheckpointError(DataError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(DataError):
    pass


class PpmFormatError(DataError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VerificationError(Splat4dError):
    """A self-check (gradcheck, oracle comparison) exceeded its tolerance."""
