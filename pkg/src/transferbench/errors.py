"""Exception hierarchy shared across the engine, zoo, attacks and CLI."""


class BenchError(Exception):
    """Base class for all benchmark errors."""

    exit_code = 1


class ConfigError(BenchError):
    """Invalid configuration, hyperparameter or method combination."""

    exit_code = 2


class InputShapeError(BenchError):
    """Input tensor shape does not match what a model or op expects."""

    exit_code = 2


class UnsupportedLossError(ConfigError):
    """Loss is incompatible with the given model family."""


class TrainingError(BenchError):
    """Training diverged or failed; message names the offending step."""


class ConversionError(BenchError):
    """A model could not be converted to a spiking network."""


class DataError(BenchError):
    """Dataset could not be built, loaded or filtered."""

    exit_code = 4


class InvariantViolation(BenchError):
    """A persisted result violates a checked invariant."""

    exit_code = 3
