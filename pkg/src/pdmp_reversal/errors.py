"""Exception types raised by the library."""


class PdmpError(Exception):
    """Base class for all library errors."""


class ModelSpecError(PdmpError, ValueError):
    """A model or zoo specification violates one of its constraints."""


class BoundaryCrossedError(PdmpError, ValueError):
    """A flow or hazard was requested beyond the hitting time of the active boundary."""

    def __init__(self, message, tau):
        super().__init__(message)
        self.tau = tau


class ExplosionError(PdmpError, RuntimeError):
    """Too many events were generated before the simulation horizon."""


class SolverError(PdmpError, RuntimeError):
    """The discretized stationary system could not be solved."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class NonPhysicalSolutionError(SolverError):
    """The solved density has significantly negative values."""


class IterationLimitError(SolverError):
    """A fixed-point iteration did not converge within its budget."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class DegenerateModelError(PdmpError, ValueError):
    """The model has zero total jump rate or a similar degeneracy."""


class NoBoundaryError(PdmpError, ValueError):
    """A boundary quantity was requested for a model without active boundary."""
