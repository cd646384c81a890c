"""Exception hierarchy. Each family maps onto one CLI exit code."""

from __future__ import annotations


class IfdetectError(Exception):
    exit_code = 1


class ConfigError(IfdetectError, ValueError):
    exit_code = 2


class ArgumentError(IfdetectError, ValueError):
    """Bad argument to a library call (shape, index, range)."""

    exit_code = 2


class DataError(IfdetectError):
    exit_code = 3


class FormatError(DataError):
    pass


class ConsistencyError(DataError):
    pass


class UsageError(DataError):
    pass


class NumericalError(IfdetectError, ArithmeticError):
    exit_code = 4


class TrainingError(NumericalError):
    pass


class CapabilityError(IfdetectError):
    exit_code = 4


class SizeError(CapabilityError):
    pass


class OracleError(NumericalError):
    pass


class PipelineError(IfdetectError):
    exit_code = 3


class AcceptanceError(IfdetectError):
    exit_code = 5
