"""Exception types shared across the package."""


class WeylWorldsError(Exception):
    """Base class for all package-specific errors."""


class UnsupportedDimensionError(WeylWorldsError, ValueError):
    """Raised when an operation is undefined for the given configuration-space dimension."""


class NodeProximityError(WeylWorldsError, RuntimeError):
    """Raised when an evaluation point falls inside a masked (node) region."""


class DomainTooSmallError(WeylWorldsError, RuntimeError):
    """Raised when a wavefunction has non-negligible amplitude on the grid boundary."""


class DegenerateSpacingError(WeylWorldsError, ValueError):
    """Raised by the 1D spacing density estimator when two worlds coincide."""


class NonQuantizedCirculationError(WeylWorldsError, RuntimeError):
    """Raised when a loop circulation sits too far from every integer multiple of h."""


class StabilityError(WeylWorldsError, ValueError):
    """Raised when an integrator time step fails the stability gate."""


class NumericalError(WeylWorldsError, RuntimeError):
    """Raised on solver non-convergence or non-finite intermediate results."""


class ConfigError(WeylWorldsError, ValueError):
    """Raised for malformed or schema-violating scenario configurations."""
