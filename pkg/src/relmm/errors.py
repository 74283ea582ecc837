"""Exception hierarchy shared by all modules.

The CLI maps each class onto a stable exit code, so library code raises
these instead of returning status values.
"""


class RelmmError(Exception):
    """Base class for package errors."""


class ValidationError(RelmmError, ValueError):
    """Input data or configuration violates a documented invariant."""


class ParseError(ValidationError):
    """Malformed CSV input."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(ValidationError):
    """Invalid simulation, optimizer or CLI settings."""


class InfeasibleError(RelmmError):
    """The requested estimator cannot be computed on this input."""


class NumericalError(RelmmError, ArithmeticError):
    """Linear algebra failure such as a singular information matrix."""


class RankDeficiencyError(NumericalError):
    """Fixed-effects design does not have full column rank."""

    def __init__(self, message, columns=()):
        self.columns = tuple(columns)
        if self.columns:
            message = f"{message}; dependent columns: {', '.join(map(str, self.columns))}"
        super().__init__(message)
