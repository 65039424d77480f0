"""Exception hierarchy shared across the package."""


class MoelabError(Exception):
    """Base class for all package errors."""


class InvalidInputError(MoelabError):
    """A caller-supplied value violates a precondition."""


class InvalidStateError(MoelabError):
    """An object is not in a state that permits the requested operation."""


class ConfigError(InvalidInputError):
    """A config file or override cannot be parsed or validated."""


class NumericError(MoelabError):
    """A computation produced a non-finite or otherwise unusable value."""


class DegenerateGapError(NumericError):
    """The fixed-size loss gap is zero, so efficiency is undefined."""


class FormatError(MoelabError):
    """A checkpoint file is malformed, truncated, or has the wrong magic/version."""
