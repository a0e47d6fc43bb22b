"""Specialized exceptions for snflow."""


class SnflowException(Exception):
    """Any exception raised by snflow."""


class ConfigError(SnflowException):
    """The configuration can't be read or has invalid values."""


class ArgumentError(SnflowException, ValueError):
    """A library call got arguments it can't work with."""


class DomainError(ArgumentError):
    """A function was evaluated outside of its domain."""


class ContractError(SnflowException, TypeError):
    """A callable returned something of the wrong kind."""


class UnsupportedOperation(SnflowException):
    """The requested operation isn't supported."""


class UnsupportedStructureError(UnsupportedOperation):
    """A diffusion structure isn't supported by an integrator."""


class NumericalError(SnflowException):
    """A numerical procedure failed."""


class SolverError(NumericalError):
    """An ODE or SDE solve failed."""


class StiffnessError(SolverError):
    """The adaptive step size underflowed."""


class DivergenceError(SolverError):
    """The solution became non-finite."""


class EstimationError(NumericalError):
    """A density estimate couldn't be computed."""

    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class GradientError(NumericalError):
    """A parameter gradient couldn't be computed."""


class ResourceError(NumericalError):
    """A computation ran out of memory."""


class TrainingAborted(NumericalError):
    """
    Training stopped on a non-finite loss or gradient.

    `model` is the last model with finite parameters, `history` the metrics
    recorded so far.
    """

    def __init__(self, message: str, model=None, history=None):
        super().__init__(message)
        self.model = model
        self.history = history or []
