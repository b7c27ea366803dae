"""Exception types shared across the package."""


class FeatageError(Exception):
    """Base class for all errors raised by featage."""


class DataFormatError(FeatageError):
    """A byte stream or text file does not conform to its format.

    Covers malformed CSV rows (message carries the line number), bad magic
    bytes, unsupported versions, and truncated or trailing binary data.
    """


class ValidationError(FeatageError):
    """Well-formed input that violates a domain invariant.

    Examples: duplicate (subject, age, seq) keys, inconsistent vector
    dimensions, zero-norm vectors, out-of-range ages, gallery/distractor
    subject collisions.
    """


class ConfigError(FeatageError):
    """Invalid configuration or parameter combination."""
