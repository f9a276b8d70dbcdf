"""Exception hierarchy shared by all pipeline stages.

The CLI maps these onto exit codes: configuration/validation problems exit
with 1, numerical failures with 2.
"""


class MRFError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ConfigurationError(MRFError, ValueError):
    """Invalid parameters, inconsistent shapes or an unusable configuration."""


class ValidationError(ConfigurationError):
    """Input data (files, maps, arrays) violate a documented invariant."""


class LineageError(ConfigurationError):
    """Files declared as dependencies were produced from different inputs."""


class NumericalFailure(MRFError, ArithmeticError):
    """A numerical routine produced non-finite values or diverged.

    Args:
        message: Human readable description.
        diagnostics: Optional mapping with iterate diagnostics (traces,
            iteration index, ...) to help post-mortem analysis.
    """

    exit_code = 2

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class SimulationFailure(NumericalFailure):
    """Spin simulation returned non-finite values for some tissue parameters."""
