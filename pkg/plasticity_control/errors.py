from typing import Dict, Optional


class PlasticityError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(PlasticityError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(PlasticityError, ValueError):
    """Settings are invalid or mutually inconsistent."""


class DataError(PlasticityError, ValueError):
    """Input data is missing or violates an expectation."""


class FormatError(DataError):
    """A binary file does not have the expected layout."""


class StateError(PlasticityError, RuntimeError):
    """An operation was called before its prerequisites ran."""


class UsageError(PlasticityError, ValueError):
    """Invalid command line usage."""


class NumericalAbort(PlasticityError, ArithmeticError):
    """Training diverged; raised instead of silently clamping.

    Args:
        message: description of the failure.
        diagnostics: named statistics at the time of failure
        (step, learning-rate and importance summaries).
    """

    def __init__(self, message: str, diagnostics: Optional[Dict] = None) -> None:
        self.diagnostics = dict(diagnostics or {})
        details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        super().__init__(f"{message} ({details})" if details else message)
