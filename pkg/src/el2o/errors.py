"""Exception types shared across the package."""


class El2oError(Exception):
    """Base class for all library errors."""


class DomainError(El2oError):
    """Target returned a non-finite value; carries the offending point."""

    def __init__(self, message, z=None):
        super().__init__(message)
        self.z = z


class ScalingError(El2oError):
    """Scaling freeze failed (non-positive variance upstream)."""


class TransformRangeError(El2oError):
    """Transform evaluation left its numerically safe range."""


class MarginalizationError(El2oError):
    """Requested marginal has a singular sub-covariance."""


class ComponentSeedError(El2oError):
    """Sample Hessian unusable as a new mixture component seed."""


class ObjectiveConfigError(El2oError):
    """Residual stack requested derivative orders the batch lacks."""


class NeedMoreSamplesError(El2oError):
    """Parameter solve is under-constrained by the current batch."""


class GridBoundsError(El2oError):
    """Quadrature grid loses more probability mass than allowed."""


class BurnInError(El2oError):
    """MAP optimization diverged."""


class ConfigError(El2oError):
    """Run specification failed validation; names the offending field."""
