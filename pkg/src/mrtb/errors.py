"""Shared exception types."""


class InvalidInputError(ValueError):
    """An operation received arguments outside its contract."""


class InvalidConfigError(ValueError):
    """A configuration value or combination is not usable."""


class IngestionError(RuntimeError):
    """A corpus file could not be read."""


class TrainingError(RuntimeError):
    """Training produced a non-finite quantity.

    Carries ``step`` and, when known, the offending ``name`` (parameter or
    layer).
    """

    def __init__(self, message: str, step: int | None = None, name: str | None = None):
        super().__init__(message)
        self.step = step
        self.name = name


class SolverError(RuntimeError):
    """An iterative solver failed to converge within its budget."""

    def __init__(self, message: str, round_index: int | None = None):
        super().__init__(message)
        self.round_index = round_index


class NumericError(RuntimeError):
    """A numeric routine produced a non-finite intermediate."""


class CheckFailureError(RuntimeError):
    """Gradient checking could not evaluate the model at a probe point."""
