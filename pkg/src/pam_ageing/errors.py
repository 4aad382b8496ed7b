"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of a formula."""


class ResourceError(RuntimeError):
    """A lattice box or point window exceeds its configured budget."""


class StabilityError(ValueError):
    """Requested explicit time step violates the stability bound."""
