"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Bad inputs or malformed files; CLI maps this to exit code 2."""


class FormatError(ValidationError):
    """A file exists but its header or payload is malformed."""
