"""Exception hierarchy shared by every module.

Contract violations (bad shapes, bad parameters, missing lookups) map to CLI
exit code 2; numeric failures (NaN/Inf) map to exit code 3.
"""


class MadError(Exception):
    """Base class for all package errors."""


class ContractError(MadError, ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class GeometryError(ContractError):
    """A convolution or windowing geometry yields an empty output."""


class ParameterError(ContractError):
    """A scalar parameter is outside its admissible range."""


class UnknownKeyError(ContractError, KeyError):
    """A named entity (subject, story, split) does not exist."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class NumericError(MadError, FloatingPointError):
    """A computation produced NaN or Inf."""
