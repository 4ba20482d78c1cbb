"""Exception hierarchy shared by every subsystem.

The CLI maps :class:`NumericError` (and subclasses) to exit code 2 and every
other :class:`ReadPvlaError` to exit code 1.
"""


class ReadPvlaError(Exception):
    """Base class for all package errors."""


class DimensionError(ReadPvlaError, ValueError):
    pass


class ConfigError(ReadPvlaError, ValueError):
    pass


class DegenerateInputError(ReadPvlaError, ValueError):
    pass


class SizeError(ReadPvlaError, ValueError):
    pass


class InfeasibleError(ReadPvlaError, ValueError):
    pass


class CompatibilityError(ReadPvlaError, ValueError):
    pass


class DatasetSpecError(ConfigError):
    pass


class NumericError(ReadPvlaError, ArithmeticError):
    pass


class TrainingError(NumericError):
    pass
