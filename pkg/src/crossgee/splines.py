"""Clamped B-spline bases evaluated by the Cox-de Boor recursion.

A basis of ``m`` functions of degree ``d`` is defined by a knot vector of
length ``m + d + 1`` whose boundary knots repeat ``d + 1`` times. Interior
knots are placed at quantiles of the observed times, so irregular
measurement grids get knots where the data are. Evaluation outside the
training domain is an error, never extrapolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ExtrapolationError, KnotPlacementError


@dataclass(frozen=True)
class SplineBasis:
    """Knot vector and degree; ``m = len(knots) - degree - 1`` functions."""

    degree: int
    knots: np.ndarray

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float).copy()
        knots.flags.writeable = False
        object.__setattr__(self, "knots", knots)

    @property
    def m(self) -> int:
        return self.knots.size - self.degree - 1

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.knots[0]), float(self.knots[-1])


@dataclass(frozen=True)
class SmoothFunction:
    """A fitted smooth: coefficients over a shared basis."""

    basis: SplineBasis
    coefficients: np.ndarray

    def __post_init__(self):
        coef = np.asarray(self.coefficients, dtype=float).copy()
        if coef.shape != (self.basis.m,):
            raise ValueError(
                f"coefficient length {coef.shape} does not match basis size {self.basis.m}"
            )
        coef.flags.writeable = False
        object.__setattr__(self, "coefficients", coef)

    def __call__(self, t):
        return evaluate_smooth(self, t)


def build_basis(times, degree: int = 3, m: int | None = None) -> SplineBasis:
    """Build a clamped basis over the observed times.

    ``m - degree - 1`` interior knots are placed at the l/(n_int+1)
    quantiles of ``times``. When ``m`` is None the caller is expected to
    have resolved the default (max observations per period) already;
    here it falls back to ``degree + 1`` (no interior knots).
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 2:
        raise KnotPlacementError("need a 1-d array of at least two times")
    distinct = np.unique(times)
    if distinct.size < 2:
        raise KnotPlacementError("need at least two distinct times to span a domain")
    if degree < 0:
        raise KnotPlacementError("degree must be nonnegative")
    if m is None:
        m = degree + 1
    if m < degree + 1:
        raise KnotPlacementError(f"basis size m={m} must be at least degree+1={degree + 1}")

    lo, hi = float(distinct[0]), float(distinct[-1])
    n_interior = m - degree - 1
    if n_interior > 0:
        qs = np.arange(1, n_interior + 1) / (n_interior + 1)
        interior = np.quantile(times, qs)
        strictly_inside = (interior > lo) & (interior < hi)
        if not (np.all(strictly_inside) and np.all(np.diff(interior) > 0)):
            raise KnotPlacementError(
                f"{distinct.size} distinct times cannot support {n_interior} interior "
                f"knots; use a smaller basis size than m={m}"
            )
    else:
        interior = np.empty(0)

    knots = np.concatenate([np.full(degree + 1, lo), interior, np.full(degree + 1, hi)])
    return SplineBasis(degree=degree, knots=knots)


def _check_domain(basis: SplineBasis, ts: np.ndarray) -> None:
    lo, hi = basis.domain
    bad = (ts < lo) | (ts > hi) | ~np.isfinite(ts)
    if np.any(bad):
        raise ExtrapolationError(float(np.ravel(ts)[int(np.argmax(np.ravel(bad)))]), (lo, hi))


def basis_matrix(basis: SplineBasis, times) -> np.ndarray:
    """Evaluate all basis functions on an array of times: shape (len(times), m).

    Rows satisfy the partition of unity; values come from the de Boor
    triangular recursion over the d+1 functions active at each point.
    """
    ts = np.atleast_1d(np.asarray(times, dtype=float))
    _check_domain(basis, ts)
    knots, degree, m = basis.knots, basis.degree, basis.m

    spans = np.searchsorted(knots, ts, side="right") - 1
    np.clip(spans, degree, m - 1, out=spans)

    nt = ts.size
    vals = np.zeros((nt, degree + 1))
    vals[:, 0] = 1.0
    if degree > 0:
        left = np.empty((nt, degree + 1))
        right = np.empty((nt, degree + 1))
        for j in range(1, degree + 1):
            left[:, j] = ts - knots[spans + 1 - j]
            right[:, j] = knots[spans + j] - ts
            saved = np.zeros(nt)
            for r in range(j):
                denom = right[:, r + 1] + left[:, j - r]
                # denom == 0 only where the corresponding value is 0 too
                temp = np.where(denom != 0.0, vals[:, r] / np.where(denom == 0.0, 1.0, denom), 0.0)
                vals[:, r] = saved + right[:, r + 1] * temp
                saved = left[:, j - r] * temp
            vals[:, j] = saved

    out = np.zeros((nt, m))
    cols = spans[:, None] + np.arange(-degree, 1)[None, :]
    np.put_along_axis(out, cols, vals, axis=1)
    return out


def evaluate_basis(basis: SplineBasis, t: float) -> np.ndarray:
    """Values (s_1(t), ..., s_m(t)) at a single point inside the domain."""
    return basis_matrix(basis, [float(t)])[0]


def evaluate_smooth(f: SmoothFunction, t) -> np.ndarray | float:
    """Evaluate the smooth; scalar in, scalar out."""
    ts = np.asarray(t, dtype=float)
    values = basis_matrix(f.basis, np.atleast_1d(ts)) @ f.coefficients
    return float(values[0]) if ts.ndim == 0 else values


def greville_abscissae(basis: SplineBasis) -> np.ndarray:
    """Knot averages; coefficients equal to these reproduce f(t) = t."""
    d = basis.degree
    if d == 0:
        return 0.5 * (basis.knots[:-1] + basis.knots[1:])
    return np.array([basis.knots[b + 1 : b + d + 1].mean() for b in range(basis.m)])


def sum_to_zero_transform(column_totals: np.ndarray) -> np.ndarray:
    """Orthonormal Z (m x m-1) spanning the null space of one linear constraint.

    Reparameterizing coefficients as ``alpha = Z @ gamma`` enforces
    ``column_totals @ alpha = 0`` exactly while keeping full column rank;
    used to make the time smooth orthogonal to the intercept.
    """
    c = np.asarray(column_totals, dtype=float).reshape(1, -1)
    _, _, vt = np.linalg.svd(c, full_matrices=True)
    return vt[1:].T
