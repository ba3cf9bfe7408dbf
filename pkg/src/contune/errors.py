"""Exception taxonomy shared by every module."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """An input is numerically degenerate (zero norm, cancelling denominator, ...)."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf from finite inputs."""


class ContractError(RuntimeError):
    """A caller violated an operation's pre/post contract."""


class ConfigError(ValueError):
    """A configuration value or combination is invalid."""


class DataError(ValueError):
    """A data record or corpus is unusable."""


class LengthError(ValueError):
    """A sequence does not fit the model's length budget."""


class IntegrityError(ValueError):
    """Stored data fails its integrity (hash) check."""


class ParseError(ValueError):
    """A serialized record is malformed; carries the offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointError(ValueError):
    """A checkpoint file is corrupt or has an unsupported version."""
