"""Exception hierarchy shared across the package."""


class FreeboundError(Exception):
    """Base class for all package errors."""


class CoefficientDomainError(FreeboundError):
    """Diffusion coefficients violate their domain requirements (e.g. beta <= 0)."""


class NumericError(FreeboundError):
    """A numerical routine failed to converge; carries diagnostics in args."""


class UnsupportedFamilyError(FreeboundError):
    """No analytic transition density registered for this diffusion family."""


class ConstructionError(FreeboundError):
    """Inconsistent inputs while assembling a gain function."""


class DomainError(FreeboundError):
    """Input function violates a sign/domain restriction (e.g. negative discount)."""


class SolverError(FreeboundError):
    """Obstacle solver failed; carries the worst residual seen."""


class PreconditionError(FreeboundError):
    """Operation precondition not met (e.g. window not inside a sign region)."""


class InversionError(FreeboundError):
    """Boundary inversion requested on a non-monotone segment."""


class DataQualityError(FreeboundError):
    """Solver output rejected (e.g. too many up-set violations in the mask)."""


class ConfigError(FreeboundError):
    """Run configuration failed validation."""


class SimulationError(FreeboundError):
    """Monte Carlo run produced non-finite per-path statistics."""
