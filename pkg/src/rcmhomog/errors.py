"""Exception types shared across the package."""


class ParameterError(ValueError):
    """Invalid lattice, distribution or configuration parameters."""


class FormatError(ValueError):
    """Unreadable, truncated or wrong-version data file."""


class DomainError(ValueError):
    """Operator applied outside its domain (wrong boundary condition, non-mean-zero data, ...)."""


class UsageError(ValueError):
    """A call whose preconditions are violated by the caller."""


class ConvergenceError(RuntimeError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
