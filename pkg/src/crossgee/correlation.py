"""Working correlation structures and their moment estimation.

The moment estimating equation for the correlation parameter pairs
intra-subject Pearson residual products against their working expectation
``phi * R_ab(alpha)``. For the two parametric structures shipped here the
root has a closed form: the exchangeable alpha is the average cross
product over all intra-subject pairs divided by phi, and the ar1 alpha is
the average lag-1 product (adjacent observations in (period, time) order)
divided by phi.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EstimationError

STRUCTURES = ("independence", "exchangeable", "ar1")

# clipping margin keeping alpha strictly inside the admissible open interval
_ALPHA_MARGIN = 1e-6


@dataclass(frozen=True)
class WorkingCorrelation:
    structure: str
    alpha: float | None = None

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise ValueError(f"unknown structure {self.structure!r}; expected one of {STRUCTURES}")
        if self.structure == "independence":
            if self.alpha is not None:
                raise ValueError("independence carries no correlation parameter")
        elif self.alpha is None:
            raise ValueError(f"{self.structure} requires an alpha value")


def admissible_interval(structure: str, size: int) -> tuple[float, float]:
    """Open interval of alpha values giving a positive definite matrix."""
    if structure == "exchangeable":
        lo = -1.0 / (size - 1) if size > 1 else -1.0
        return lo, 1.0
    if structure == "ar1":
        return -1.0, 1.0
    return 0.0, 0.0


def materialize(corr: WorkingCorrelation, size: int) -> np.ndarray:
    """The size x size working correlation matrix R(alpha).

    Positions are the rank order of a subject's observations sorted by
    (period, within-period time); ar1 decays with position distance.
    """
    if size < 1:
        raise ValueError("size must be at least 1")
    if corr.structure == "independence":
        return np.eye(size)
    alpha = float(corr.alpha)
    lo, hi = admissible_interval(corr.structure, size)
    if not (lo < alpha < hi):
        raise EstimationError(
            f"alpha={alpha!r} outside the admissible range ({lo!r}, {hi!r}) "
            f"for {corr.structure} at size {size}"
        )
    if corr.structure == "exchangeable":
        out = np.full((size, size), alpha)
        np.fill_diagonal(out, 1.0)
        return out
    lags = np.abs(np.subtract.outer(np.arange(size), np.arange(size)))
    return alpha ** lags


@dataclass(frozen=True)
class ResidualMomentSystem:
    """Per-subject Pearson residuals plus the pooled pair products.

    ``products`` holds every intra-subject product r_a r_b (a < b, positions
    in (period, time) order) concatenated over subjects; ``lags`` the
    corresponding position distances; ``pair_counts`` each subject's
    q = C(T, 2). Expectations are ``phi * R_ab(alpha)`` with unit diagonal
    scaling (the closed-form roots below are invariant to any constant
    diagonal scaling matrix).
    """

    residuals: tuple[np.ndarray, ...]
    phi: float
    products: np.ndarray
    lags: np.ndarray
    pair_counts: tuple[int, ...]

    @property
    def max_size(self) -> int:
        return max(r.size for r in self.residuals)


def _pair_indices(t: int) -> tuple[np.ndarray, np.ndarray]:
    cached = _pair_indices.cache.get(t)
    if cached is None:
        cached = np.triu_indices(t, k=1)
        _pair_indices.cache[t] = cached
    return cached


_pair_indices.cache = {}


def moment_system(residuals, phi: float) -> ResidualMomentSystem:
    """Collect pairwise residual products from per-subject residual vectors."""
    residuals = tuple(np.asarray(r, dtype=float) for r in residuals)
    prods, lags, counts = [], [], []
    for r in residuals:
        t = r.size
        counts.append(math.comb(t, 2))
        if t < 2:
            continue
        a, b = _pair_indices(t)
        prods.append(r[a] * r[b])
        lags.append(b - a)
    if not prods:
        raise EstimationError("no subject has two or more observations; cannot form residual pairs")
    return ResidualMomentSystem(
        residuals=residuals,
        phi=float(phi),
        products=np.concatenate(prods),
        lags=np.concatenate(lags),
        pair_counts=tuple(counts),
    )


def update_alpha(system: ResidualMomentSystem, structure: str) -> tuple[WorkingCorrelation, bool]:
    """Solve the correlation moment equation for the given structure.

    Returns the working correlation and a flag marking whether the root had
    to be clipped into the admissible open interval (callers record the
    clip in the convergence trace).
    """
    if structure == "independence":
        raise ValueError("independence has no correlation parameter to update")
    if structure not in STRUCTURES:
        raise ValueError(f"unknown structure {structure!r}")
    if system.phi <= 0:
        raise EstimationError(f"dispersion must be positive, got {system.phi!r}")

    if structure == "exchangeable":
        alpha = float(np.mean(system.products)) / system.phi
    else:  # ar1: lag-1 adjacent products only
        lag1 = system.products[system.lags == 1]
        if lag1.size == 0:
            raise EstimationError("no adjacent observation pairs available for ar1")
        alpha = float(np.mean(lag1)) / system.phi

    lo, hi = admissible_interval(structure, system.max_size)
    clipped = not (lo < alpha < hi)
    if clipped:
        alpha = min(max(alpha, lo + _ALPHA_MARGIN), hi - _ALPHA_MARGIN)
    return WorkingCorrelation(structure=structure, alpha=alpha), clipped
