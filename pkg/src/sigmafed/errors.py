"""Exception hierarchy shared across the package.

Every error raised on purpose derives from SigmaFedError so the CLI can
map failures onto its exit codes (config -> 2, numeric -> 3, I/O -> 4).
"""


class SigmaFedError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SigmaFedError):
    """A dimension or shape mismatch between arrays or network layers."""


class NumericError(SigmaFedError):
    """A numeric failure: non-finite values, non-positive-definite matrices."""


class FormatError(SigmaFedError):
    """A malformed, truncated, or version-incompatible file."""


class ConfigError(SigmaFedError):
    """An invalid run configuration (unknown keys, bad types, bad values)."""
