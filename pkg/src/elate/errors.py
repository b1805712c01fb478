"""Exception hierarchy shared across the package.

Two broad families matter to callers: configuration/usage problems
(`ParameterError` and subclasses, mapped to exit code 2 by the CLI) and
numerical failures encountered mid-computation (`NumericalError` and
subclasses, mapped to exit code 3).
"""


class ElateError(Exception):
    """Base class for all package-specific errors."""


class ParameterError(ElateError, ValueError):
    """Invalid argument, configuration or contract violation."""


class DataError(ParameterError):
    """Malformed or inconsistent input data (labels, columns, files)."""


class NumericalError(ElateError, RuntimeError):
    """A computation failed for numerical reasons."""


class DegeneracyError(NumericalError):
    """Weights or particles degenerated beyond what estimators tolerate."""


class RunawayLadderError(NumericalError):
    """Adaptive tempering exceeded the hard cap on ladder length."""


class PoleError(NumericalError):
    """Rational mean evaluated too close to a denominator zero."""


class ConditioningError(NumericalError):
    """Gram matrix not positive definite even after jitter escalation."""


class FitFailureError(NumericalError):
    """Every candidate regression model was rejected."""
