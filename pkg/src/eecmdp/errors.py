"""Exception hierarchy shared by all eecmdp modules."""


class EecmdpError(Exception):
    """Base class for library errors."""


class ConfigError(EecmdpError, ValueError):
    """Invalid scenario, quantization or table-budget configuration."""


class DomainError(EecmdpError, ValueError):
    """An argument lies outside the domain of an operation."""


class NumericalError(EecmdpError, ArithmeticError):
    """A linear-algebra step is ill-conditioned."""


class ConvergenceError(EecmdpError, RuntimeError):
    """An iteration hit its budget before meeting its stopping rule."""

    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


class InfeasibleError(EecmdpError, RuntimeError):
    """The rate constraints cannot be met by any deterministic policy."""


class MonteCarloError(EecmdpError, RuntimeError):
    """Conditioned channel sampling cannot reach the requested sample size."""
