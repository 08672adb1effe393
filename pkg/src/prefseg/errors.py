"""Exception categories shared across modules (the CLI maps them to exit codes)."""


class FormatError(ValueError):
    """A binary file is malformed. ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class ConfigError(ValueError):
    """A configuration value is invalid or infeasible."""
