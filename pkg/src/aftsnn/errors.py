"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid shapes, unknown modes, or malformed configuration fields."""

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class DataError(ValueError):
    """Input data that cannot be simulated (e.g. non-finite currents)."""


class FormatError(ValueError):
    """Malformed binary file; carries the byte offset where parsing stopped."""

    def __init__(self, message, offset=None):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})" if offset is not None else message)


class NumericError(FloatingPointError):
    """Non-finite value produced during a backward pass or optimizer step."""
