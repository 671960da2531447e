"""Exception hierarchy shared by every module."""


class UrbanSegError(Exception):
    """Base class for all package errors."""


class ValidationError(UrbanSegError, ValueError):
    """Inputs violate a documented precondition (CLI exit code 1)."""


class FormatError(UrbanSegError, ValueError):
    """A file or byte stream is malformed, truncated, or of an unsupported kind (CLI exit code 2)."""
