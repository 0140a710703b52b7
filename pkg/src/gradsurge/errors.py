"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: configuration and usage problems exit
with 2, verification failures with 3 and numeric failures with 4.
"""


class GradsurgeError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(GradsurgeError, ValueError):
    """Invalid configuration or incompatible shapes."""

    exit_code = 2


class UsageError(GradsurgeError, ValueError):
    """An operation was called outside its preconditions."""

    exit_code = 2


class UndefinedMetricError(UsageError):
    """A metric is undefined for the given input (e.g. single-class ROC-AUC)."""


class NumericError(GradsurgeError, ArithmeticError):
    """Non-finite values or a divergent iteration."""

    exit_code = 4


class NeumannDivergenceError(NumericError):
    """The truncated Neumann series for the inverse Hessian is diverging."""


class VerificationError(GradsurgeError):
    """One or more oracle checks failed."""

    exit_code = 3
