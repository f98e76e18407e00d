"""Exception taxonomy shared across the package."""


class HeatmarkError(Exception):
    """Base class for all package errors."""


class ShapeError(HeatmarkError, ValueError):
    """Input shapes are invalid for an operation."""


class ConfigError(HeatmarkError, ValueError):
    """A configuration value is out of its legal domain."""


class ContractError(HeatmarkError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(HeatmarkError, ArithmeticError):
    """A computation produced NaN/Inf or left its numeric domain."""


class FormatError(HeatmarkError, ValueError):
    """A file does not conform to its bit-exact format.

    ``offset`` carries the byte position of the first deviation when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(HeatmarkError, RuntimeError):
    """Training failed; carries the step index and the loss breakdown."""

    def __init__(self, message, step=None, breakdown=None):
        super().__init__(message)
        self.step = step
        self.breakdown = dict(breakdown or {})
