"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A NaN or otherwise unusable value reached a numeric kernel."""


class ContractError(ValueError):
    """A call violated an operation's preconditions."""


class ConfigError(ValueError):
    """A configuration is inconsistent with the data it is applied to."""


class ValidationError(ValueError):
    """User-supplied values failed validation."""


class FormatError(ValueError):
    """A file on disk does not match the expected container format."""


class CheckpointError(FormatError):
    """A checkpoint could not be loaded."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
