"""Exception hierarchy shared by every mmdistill module."""


class MMDistillError(Exception):
    """Base class; the CLI maps any subclass to a nonzero exit code."""

    exit_code = 1


class DimensionError(MMDistillError, ValueError):
    exit_code = 3


class ParameterError(MMDistillError, ValueError):
    exit_code = 4


class NumericError(MMDistillError, ArithmeticError):
    exit_code = 5


class ContractError(MMDistillError, RuntimeError):
    exit_code = 6


class ConfigurationError(MMDistillError, ValueError):
    exit_code = 2


class LengthError(MMDistillError, ValueError):
    exit_code = 7


class TokenizationError(MMDistillError, KeyError):
    exit_code = 8

    def __str__(self) -> str:
        # KeyError quotes its message; keep it readable.
        return str(self.args[0]) if self.args else ""
