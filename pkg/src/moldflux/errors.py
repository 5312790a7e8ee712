"""Exception hierarchy shared by all modules."""


class MoldFluxError(Exception):
    """Base class for every error raised by the package."""


class InvalidArgument(MoldFluxError, ValueError):
    pass


class OutOfDomain(MoldFluxError, ValueError):
    pass


class OutOfRange(MoldFluxError, ValueError):
    pass


class InvalidState(MoldFluxError, RuntimeError):
    pass


class SolverFailure(MoldFluxError, RuntimeError):
    """A linear or eigen solver did not converge.

    ``residual`` carries the last relative residual when available.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class SingularMatrix(MoldFluxError, ArithmeticError):
    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class OptimizationFailure(MoldFluxError, RuntimeError):
    pass


class SelectionFailure(MoldFluxError, RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []


class ConfigError(MoldFluxError, ValueError):
    pass
