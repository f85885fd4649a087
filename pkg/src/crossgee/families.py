"""Exponential-family mean/variance machinery and the dispersion estimator.

A :class:`Family` pairs a variance function with a link. Everything is
vectorized over numpy arrays; scalar input gives scalar output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegreesOfFreedomError, DomainError

FAMILY_KINDS = ("gaussian", "poisson", "gamma", "binomial")
LINKS = ("identity", "log", "inverse", "logit")

# conventional canonical pairings, used when a link is not given explicitly
DEFAULT_LINKS = {
    "gaussian": "identity",
    "poisson": "log",
    "gamma": "log",
    "binomial": "logit",
}


@dataclass(frozen=True)
class Family:
    """Response family: variance function ``V(mu)`` plus link ``g(mu)``.

    Variance functions: gaussian ``1``, poisson ``mu``, gamma ``mu^2``,
    binomial ``mu (1 - mu)``.
    """

    kind: str
    link: str

    def __post_init__(self):
        if self.kind not in FAMILY_KINDS:
            raise ValueError(f"unknown family kind {self.kind!r}; expected one of {FAMILY_KINDS}")
        if self.link not in LINKS:
            raise ValueError(f"unknown link {self.link!r}; expected one of {LINKS}")

    def variance(self, mu):
        """Variance function V(mu)."""
        mu = np.asarray(mu, dtype=float)
        if self.kind == "gaussian":
            return np.ones_like(mu)
        if self.kind == "poisson":
            return mu
        if self.kind == "gamma":
            return mu * mu
        return mu * (1.0 - mu)

    def link_fn(self, mu):
        """g(mu)."""
        mu = np.asarray(mu, dtype=float)
        if self.link == "identity":
            return mu
        if self.link == "log":
            return np.log(mu)
        if self.link == "inverse":
            return 1.0 / mu
        return np.log(mu / (1.0 - mu))

    def link_inverse(self, eta):
        """g^{-1}(eta)."""
        eta = np.asarray(eta, dtype=float)
        with np.errstate(over="ignore", divide="ignore"):
            if self.link == "identity":
                return eta + 0.0
            if self.link == "log":
                return np.exp(eta)
            if self.link == "inverse":
                return 1.0 / eta
            return 1.0 / (1.0 + np.exp(-eta))

    def mean_derivative(self, eta):
        """d mu / d eta at the given linear predictor."""
        eta = np.asarray(eta, dtype=float)
        with np.errstate(over="ignore", divide="ignore"):
            if self.link == "identity":
                return np.ones_like(eta)
            if self.link == "log":
                return np.exp(eta)
            if self.link == "inverse":
                return -1.0 / (eta * eta)
            mu = 1.0 / (1.0 + np.exp(-eta))
            return mu * (1.0 - mu)

    def in_support(self, mu) -> np.ndarray:
        """Elementwise: is mu inside the open support of the family?"""
        mu = np.asarray(mu, dtype=float)
        ok = np.isfinite(mu)
        if self.kind in ("poisson", "gamma"):
            ok &= mu > 0.0
        elif self.kind == "binomial":
            ok &= (mu > 0.0) & (mu < 1.0)
        return ok


def family_functions(family: Family, eta):
    """Evaluate (mu, d mu/d eta, V(mu)) from the linear predictor.

    Raises
    ------
    DomainError
        If any mean leaves the family support (the first offending flat
        index is reported) or is non-finite.
    """
    eta = np.asarray(eta, dtype=float)
    mu = family.link_inverse(eta)
    ok = family.in_support(mu)
    if not np.all(ok):
        bad = int(np.argmin(np.ravel(ok)))
        raise DomainError(
            f"mean outside {family.kind} support at observation {bad}: "
            f"eta={np.ravel(eta)[bad]!r} -> mu={np.ravel(mu)[bad]!r}"
        )
    dmu = family.mean_derivative(eta)
    return mu, dmu, family.variance(mu)


def estimate_dispersion(pearson_residuals, p: int) -> float:
    """Moment estimator ``phi = sum(r^2) / (N - p)`` from Pearson residuals.

    ``p`` is the number of estimated mean parameters.
    """
    r = np.ravel(np.asarray(pearson_residuals, dtype=float))
    n = r.size
    if n <= p:
        raise DegreesOfFreedomError(
            f"cannot estimate dispersion with N={n} residuals and p={p} parameters"
        )
    return float(r @ r) / (n - p)
