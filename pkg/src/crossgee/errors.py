"""Exception types raised across the package.

Every error carries enough context to act on (offending column names,
observation indices, the evaluation point and domain, ...) so callers can
report failures without re-deriving them.
"""

from __future__ import annotations


class CrossgeeError(Exception):
    """Base class for all package errors."""


class DataValidationError(CrossgeeError):
    """A dataset violates the long-format crossover invariants."""


class UnknownCovariateError(CrossgeeError):
    """A parametric term does not resolve to any dataset covariate."""


class DomainError(CrossgeeError):
    """A mean or linear predictor left the family's admissible range."""


class KnotPlacementError(CrossgeeError):
    """The requested basis size cannot be supported by the observed times."""


class ExtrapolationError(CrossgeeError):
    """Evaluation outside the spline training domain."""

    def __init__(self, t: float, domain: tuple[float, float]):
        self.t = float(t)
        self.domain = (float(domain[0]), float(domain[1]))
        super().__init__(
            f"t={self.t!r} lies outside the basis domain "
            f"[{self.domain[0]!r}, {self.domain[1]!r}]; extrapolation is not supported"
        )


class DegreesOfFreedomError(CrossgeeError):
    """Not enough observations to estimate the requested quantity."""


class DesignSingularityError(CrossgeeError):
    """The parametric design matrix is rank deficient."""

    def __init__(self, columns: tuple[str, ...]):
        self.columns = tuple(columns)
        super().__init__(
            "parametric design matrix is rank deficient; dependent columns: "
            + ", ".join(self.columns)
        )


class BlockSingularityError(CrossgeeError):
    """A block's Fisher information is singular."""


class DivergenceError(CrossgeeError):
    """Fisher scoring left the admissible region and step-halving failed."""


class EstimationError(CrossgeeError):
    """The correlation parameter cannot be estimated from the residuals."""


class InferenceError(CrossgeeError):
    """Covariance estimation failed (estimates themselves remain valid)."""


class DiagnosticsError(CrossgeeError):
    """A diagnostic quantity is unavailable or undefined for this fit."""


class ConfigError(CrossgeeError):
    """A run configuration is invalid."""
