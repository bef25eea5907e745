"""Exception types shared across the package.

The CLI maps each family onto an exit code (see ``cli.EXIT_CODES``).
"""


class ConfigError(ValueError):
    """Bad or unknown configuration value."""


class DataError(ValueError):
    """Malformed input data: datasets, embedding files, vocabularies, checkpoints."""


class CheckpointError(DataError):
    pass


class NumericError(ArithmeticError):
    """NaN/Inf encountered during training or scoring."""
