"""
Exception hierarchy shared by every module, and the exit codes the command
line maps them to.
"""

# Standard library
from typing import Optional

# -------------------- Exit codes --------------------
EXIT_OK = 0
EXIT_INVALID_CONFIG = 2
EXIT_NOT_CONVERGED = 3


class PolaronLabError(Exception):
    """Base class for every error raised on purpose by this package."""


class ConfigurationError(PolaronLabError, ValueError):
    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        super().__init__(message)
        self.message = message
        self.key = key
        self.line = line

    def anchored(self, source: str = "config") -> str:
        """Render as `source:line: message` when the line is known."""
        if self.line is not None:
            return f"{source}:{self.line}: {self.message}"
        return f"{source}: {self.message}"


class ValidationError(PolaronLabError, ValueError):
    pass


class UnsupportedRangeError(ValidationError):
    pass


class NumericalFailure(PolaronLabError, ArithmeticError):
    pass


class ConvergenceError(PolaronLabError, RuntimeError):
    def __init__(self, message: str, best_residual: float = float("nan")):
        super().__init__(message)
        self.best_residual = best_residual


class CapacityError(PolaronLabError, RuntimeError):
    def __init__(self, message: str, parameter: str, dimension: int):
        super().__init__(message)
        self.parameter = parameter
        self.dimension = dimension
