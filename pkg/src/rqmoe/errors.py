"""Exception types raised across the package."""


class RqMoeError(Exception):
    """Base class; ``kind`` is the short tag printed by the CLI."""

    kind = "error"


class ShapeError(RqMoeError, ValueError):
    kind = "shape"


class RangeError(RqMoeError, IndexError):
    kind = "range"


class ConfigError(RqMoeError, ValueError):
    kind = "config"


class InvalidCodeError(RqMoeError, ValueError):
    kind = "invalid_code"


class InsufficientDataError(RqMoeError, ValueError):
    kind = "insufficient_data"


class InvariantError(RqMoeError, ValueError):
    kind = "invariant"


class NumericalError(RqMoeError, FloatingPointError):
    """Non-finite loss or residual. ``step`` is 1-based, ``snapshot`` is free-form."""

    kind = "numerical"

    def __init__(self, message, step=None, snapshot=None):
        super().__init__(message)
        self.step = step
        self.snapshot = snapshot or {}


class FormatError(RqMoeError, ValueError):
    kind = "format"


class CorruptFileError(FormatError):
    kind = "corrupt_file"

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class TruncationError(FormatError):
    kind = "truncated"


class BadMagicError(FormatError):
    kind = "bad_magic"


class VersionError(FormatError):
    kind = "version"


class EncodingError(FormatError):
    kind = "encoding"
