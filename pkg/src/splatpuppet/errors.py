"""Shared exception types.

Validation problems (bad arguments, inconsistent data) raise ValidationError
or plain ValueError; on-disk format problems raise FormatError; misuse of the
autodiff tape raises StateError.  The CLI maps these onto exit codes.
"""


class ValidationError(ValueError):
    """Input data or arguments violate a documented contract."""


class FormatError(Exception):
    """A file does not conform to its documented byte layout."""


class StateError(RuntimeError):
    """Operation called in an invalid state (e.g. double backward)."""
