"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes, so keep the classes distinct even where
the messages look alike.
"""


class EqControlError(Exception):
    """Base class for every error raised by the package."""


class ConfigurationError(EqControlError, ValueError):
    """Shapes, dimensions or configuration values do not fit together."""


class PreconditionError(EqControlError):
    """A mathematical precondition fails (e.g. clouds lie in different strata)."""


class CapabilityError(EqControlError):
    """Request exceeds what the dense/desk-scale implementation supports."""


class NumericError(EqControlError, ArithmeticError):
    """A non-finite value showed up during evaluation.

    ``index`` carries the offending point index or bracket word when known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DivergenceError(NumericError):
    """The blow-up guard of the integrator tripped at time ``time``."""

    def __init__(self, message, time=None, index=None):
        super().__init__(message, index=index)
        self.time = time
