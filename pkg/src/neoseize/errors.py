"""Exception hierarchy shared by every stage of the pipeline."""


class NeoSeizeError(Exception):
    """Base class for all pipeline errors."""


class ParseError(NeoSeizeError):
    pass


class ConfigError(NeoSeizeError, ValueError):
    """Invalid settings; ``errors`` lists ``(field_path, message)`` pairs when known."""

    def __init__(self, message: str, errors=None):
        super().__init__(message)
        self.errors = list(errors or [])


class DesignError(NeoSeizeError):
    pass


class LengthError(NeoSeizeError, ValueError):
    pass


class MontageError(NeoSeizeError, KeyError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(f"missing electrodes: {', '.join(self.missing)}")

    def __str__(self):
        return self.args[0]


class ShapeError(NeoSeizeError, ValueError):
    pass


class BatchError(NeoSeizeError, ValueError):
    pass


class UsageError(NeoSeizeError, RuntimeError):
    pass


class NonFiniteError(NeoSeizeError, FloatingPointError):
    pass


class FormatError(NeoSeizeError):
    pass


class VersionError(NeoSeizeError):
    pass


class DataError(NeoSeizeError, ValueError):
    pass
