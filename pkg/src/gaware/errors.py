"""Exception hierarchy shared by every module."""


class GAwareError(Exception):
    """Base class for all package errors."""


class ValidationError(GAwareError, ValueError):
    """Input data or configuration violates a documented precondition."""


class FormatError(ValidationError):
    """A serialized artifact is malformed or carries an unsupported version."""


class EnumerationTooLarge(ValidationError):
    """Brute-force enumeration would exceed the configured size guard."""

    def __init__(self, size: float, limit: float):
        self.size = size
        self.limit = limit
        super().__init__(f"enumeration size {size:.3g} exceeds guard {limit:.3g}")
