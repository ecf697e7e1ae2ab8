"""Exception hierarchy for the tf4ctr training stack."""


class Tf4CtrError(Exception):
    """Base class for every error raised by tf4ctr."""

    exit_code = 1


class ShapeError(Tf4CtrError, ValueError):
    """Tensor shapes are incompatible for the requested op."""


class DomainError(Tf4CtrError, ValueError):
    """An op received input outside its mathematical domain."""


class ArgumentError(Tf4CtrError, ValueError):
    """A function was called with an invalid argument."""


class IndexOutOfRangeError(Tf4CtrError, IndexError):
    """A categorical id falls outside its embedding table."""


class NonFiniteError(Tf4CtrError, ArithmeticError):
    """NaN or Inf appeared in a tensor, a loss or a gradient."""


class MetricUndefinedError(Tf4CtrError, ValueError):
    """A metric cannot be computed for the given scores and labels."""


class ConfigError(Tf4CtrError, ValueError):
    """Invalid configuration value or combination."""

    exit_code = 2


class ConfigKeyError(ConfigError):
    """Unknown configuration key."""

    def __init__(self, key: str):
        super().__init__(f"Unknown configuration key: {key}")
        self.key = key


class DataError(Tf4CtrError, ValueError):
    """Malformed or insufficient input data."""

    exit_code = 3


class CheckpointError(Tf4CtrError, FileNotFoundError):
    """A checkpoint is missing or unreadable."""

    exit_code = 4
