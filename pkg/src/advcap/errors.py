"""Exception types shared across the package.

Validation problems (bad shapes, bad config, bad data) subclass ValueError;
state-machine misuse and numeric blowups subclass RuntimeError. The CLI maps
ValueError-family errors to exit code 1 and RuntimeError-family to exit 2.
"""


class ShapeError(ValueError):
    """Tensor dimensions do not satisfy an operation's contract."""


class ConfigError(ValueError):
    """A configuration value or key is invalid."""


class DataError(ValueError):
    """A dataset file or record violates the expected schema."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or has an unsupported version."""


class UnsupportedMetricError(ConfigError):
    """A metric was requested that this package deliberately does not provide."""


class TapeStateError(RuntimeError):
    """A Tape was used out of order (e.g. backward run twice on one recording)."""


class NumericError(RuntimeError):
    """Non-finite values appeared where the contract requires finite ones."""
