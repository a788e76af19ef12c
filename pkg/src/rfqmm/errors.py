"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Raised when model inputs or configuration files fail validation."""


class StabilityError(RuntimeError):
    """Raised when a requested time step violates the explicit-scheme budget."""


class OutOfDomainError(ValueError):
    """Raised when a query point lies outside the factor grid's bounding box."""


class SolverError(RuntimeError):
    """Raised when the backward sweep produces non-finite values."""
