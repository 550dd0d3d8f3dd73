"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(FloatingPointError):
    """A computation produced (or would produce) non-finite values."""


class ConfigError(ValueError):
    """Invalid experiment configuration. ``path`` names the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class CheckpointError(IOError):
    """A checkpoint is missing, corrupt, or has an incompatible format version."""
