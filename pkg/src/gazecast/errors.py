"""Exception hierarchy shared by all gazecast modules.

Three broad families map onto CLI exit codes: configuration problems (2),
data problems (3), and numerical failures (4).
"""


class GazecastError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(GazecastError):
    """Invalid or inconsistent configuration."""


class DataError(GazecastError):
    """Problems with input data."""


class ParseError(DataError):
    """Malformed input file; carries the offending row number when known."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"{message} (row {row})"
        super().__init__(message)


class RateError(DataError):
    """Timestamps do not advance at the required 1 ms step."""


class EmptyInputError(DataError):
    """Input contains no usable samples."""


class AlignmentError(DataError):
    """Two per-sample structures do not line up."""


class InsufficientDataError(DataError):
    """Not enough samples/events to compute a quantity reliably."""


class DependencyError(DataError):
    """A pipeline stage is missing an upstream artifact."""

    def __init__(self, stage: str, missing: str):
        self.stage = stage
        self.missing = missing
        super().__init__(f"stage '{stage}' requires missing artifact: {missing}")


class NumericalError(GazecastError):
    """Numerical failure (divergence, instability, singular matrices)."""


class InstabilityError(NumericalError):
    """Plant integration produced non-finite state."""


class DivergenceError(NumericalError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, batch: int):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")


class FitError(NumericalError):
    """Parameter fitting could not produce a usable result."""


class UndefinedStatisticError(DataError):
    """A statistic is undefined for the given input (e.g. constant vector)."""
