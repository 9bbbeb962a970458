"""Exception hierarchy shared across the package.

The CLI maps each class to a distinct exit code, so new failure kinds should
subclass one of these rather than raising bare ``ValueError``.
"""


class MixrulError(Exception):
    exit_code = 1


class DataFormatError(MixrulError):
    """Malformed input file (C-MAPSS text, dataset file, model file)."""

    exit_code = 2


class ConfigError(MixrulError):
    exit_code = 3


class NumericError(MixrulError):
    """Non-finite losses, invalid distribution parameters, undefined means."""

    exit_code = 4


class ParameterDomainError(NumericError, ValueError):
    pass


class MeanUndefinedError(NumericError, ValueError):
    pass


class SolverError(MixrulError):
    """A scale-parameter root finder could not produce a root."""

    exit_code = 5
