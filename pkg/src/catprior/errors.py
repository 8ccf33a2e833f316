"""Exception hierarchy shared across the pipeline.

Each class maps to a CLI exit code (see ``catprior.cli``).
"""


class CatPriorError(Exception):
    exit_code = 1


class ConfigurationError(CatPriorError):
    """Invalid configuration, shapes or model definitions."""

    exit_code = 1


class UsageError(CatPriorError):
    """An API was called out of contract (stale trace, K mismatch, ...)."""

    exit_code = 1


class DataError(CatPriorError):
    """Malformed clip, dataset or checkpoint file."""

    exit_code = 2


class TrainingError(CatPriorError):
    """Non-finite losses or gradients during optimisation."""

    exit_code = 3


class SimulationDiverged(TrainingError):
    """The simulator produced a non-finite state."""
