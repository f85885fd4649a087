"""Model diagnostics: QIC, standardized residuals with leverage, QQ bands.

The quasi-likelihoods are the independence forms evaluated at dispersion 1
(the convention that makes cross-family comparison meaningful; with an
estimated dispersion plugged in, the gaussian value degenerates to N - p).
The hat matrix uses the symmetric projection
``W^{1/2} X (sum X'WX)^{-1} X' W^{1/2}`` whose trace is exactly the
parametric rank p.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .design import DesignBundle
from .errors import DiagnosticsError, InferenceError
from .estimator import FitResult, WaldRow, independence_beta_covariance, wald_table
from .families import Family

_LEVERAGE_EPS = 1e-12


@dataclass(frozen=True)
class QicComponents:
    qic: float
    quasi_likelihood: float
    trace_penalty: float


@dataclass(frozen=True)
class ResidualSet:
    """Standardized residuals and leverages, flattened in subject order."""

    residuals: np.ndarray
    leverages: np.ndarray
    subject_ids: tuple[str, ...]
    obs_index: tuple[tuple[int, int], ...]

    def finite_residuals(self) -> np.ndarray:
        r = self.residuals
        return r[np.isfinite(r)]


@dataclass(frozen=True)
class QQBand:
    theoretical: np.ndarray
    sample: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float


@dataclass(frozen=True)
class DiagnosticsReport:
    qic: QicComponents | None
    residuals: ResidualSet
    qq: QQBand
    wald: tuple[WaldRow, ...]


def quasi_likelihood(family: Family, y, mu) -> float:
    """Independence quasi-likelihood QL(mu; I) at dispersion 1.

    gaussian: -sum (y-mu)^2 / 2; poisson: sum (y log mu - mu);
    gamma: -sum (y/mu + log mu). Binomial is not emitted (no exercised
    data path).
    """
    y = np.ravel(np.asarray(y, dtype=float))
    mu = np.ravel(np.asarray(mu, dtype=float))
    if family.kind == "gaussian":
        return float(-0.5 * np.sum((y - mu) ** 2))
    if family.kind == "poisson":
        term = np.where(y > 0, y * np.log(mu), 0.0)
        return float(np.sum(term - mu))
    if family.kind == "gamma":
        return float(-np.sum(y / mu + np.log(mu)))
    raise DiagnosticsError("binomial quasi-likelihood is not exercised by any data path")


def qic(fit: FitResult, bundle: DesignBundle) -> QicComponents:
    """QIC = -2 QL(mu_hat; I) + 2 trace(Omega_I^{-1} V_R).

    ``Omega_I`` is the naive covariance of the parametric coefficients
    under working independence at the fitted state (smooth-nuisance
    adjusted, like every beta covariance here); ``V_R`` the robust
    covariance of the fitted model.
    """
    state = fit.state
    if fit.cov_robust is None:
        raise DiagnosticsError("fit carries no robust covariance; QIC unavailable")
    family = state._ctx.spec.family

    ql = 0.0
    for i, subj in enumerate(bundle.subjects):
        ql += quasi_likelihood(family, subj.y, state.mu[i])

    try:
        omega_i = independence_beta_covariance(state)
    except InferenceError as exc:
        raise DiagnosticsError(str(exc)) from None
    sign, logdet = np.linalg.slogdet(omega_i)
    if sign <= 0 or not np.isfinite(logdet):
        raise DiagnosticsError("independence information matrix is singular")
    penalty = float(np.trace(np.linalg.solve(omega_i, fit.cov_robust)))
    return QicComponents(
        qic=float(-2.0 * ql + 2.0 * penalty),
        quasi_likelihood=float(ql),
        trace_penalty=penalty,
    )


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def standardized_residuals(fit: FitResult) -> ResidualSet:
    """Pearson standardized residuals with leverages.

    ``r = [W^{1/2}(z - X beta)]_k / (sqrt(phi) (1 - sqrt(h_k)))`` with h the
    diagonal of the symmetric block projection; observations with leverage
    1 get NaN (undefined) rather than infinity.
    """
    state = fit.state
    bundle = state._ctx.bundle

    gram = np.zeros((bundle.p, bundle.p))
    for i, subj in enumerate(bundle.subjects):
        gram += subj.X.T @ state.weight_matrices[i] @ subj.X
    gram_inv = np.linalg.inv(gram)

    res, lev, sids, oidx = [], [], [], []
    sqrt_phi = np.sqrt(state.phi)
    for i, subj in enumerate(bundle.subjects):
        w_half = _psd_sqrt(state.weight_matrices[i])
        wx = w_half @ subj.X
        h = np.einsum("ij,jk,ik->i", wx, gram_inv, wx)
        h = np.clip(h, 0.0, 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            wr = w_half @ (state.working_response[i] - subj.X @ state.beta)
            denom = sqrt_phi * (1.0 - np.sqrt(h))
            r = np.where(np.abs(denom) > _LEVERAGE_EPS, wr / denom, np.nan)
        res.append(r)
        lev.append(h)
        sids.extend([subj.subject_id] * subj.n_obs)
        oidx.extend(subj.obs_index)

    return ResidualSet(
        residuals=np.concatenate(res),
        leverages=np.concatenate(lev),
        subject_ids=tuple(sids),
        obs_index=tuple(oidx),
    )


def _order_statistic_medians(n: int) -> np.ndarray:
    # Filliben's approximation to the medians of standard-normal order stats
    p = (np.arange(1, n + 1) - 0.3175) / (n + 0.365)
    p[0] = 1.0 - 0.5 ** (1.0 / n)
    p[-1] = 0.5 ** (1.0 / n)
    return stats.norm.ppf(p)


def qq_band_data(residuals, n_sim: int = 1000, level: float = 0.95, seed: int = 0) -> QQBand:
    """Sorted residuals against normal order-statistic medians plus a
    pointwise Monte Carlo envelope from sorted standard-normal samples.

    Non-finite residuals (undefined markers) are dropped first.
    """
    r = np.ravel(np.asarray(residuals, dtype=float))
    r = r[np.isfinite(r)]
    n = r.size
    if n < 10:
        raise DiagnosticsError(f"need at least 10 residuals for a QQ band, got {n}")
    if not 0.0 < level < 1.0:
        raise DiagnosticsError(f"level must be in (0, 1), got {level!r}")

    rng = np.random.default_rng(seed)
    draws = np.sort(rng.standard_normal((n_sim, n)), axis=1)
    lo_q, hi_q = (1.0 - level) / 2.0, (1.0 + level) / 2.0
    return QQBand(
        theoretical=_order_statistic_medians(n),
        sample=np.sort(r),
        lower=np.quantile(draws, lo_q, axis=0),
        upper=np.quantile(draws, hi_q, axis=0),
        level=level,
    )


def diagnostics_report(
    fit: FitResult,
    bundle: DesignBundle,
    n_sim: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    include_qic: bool = True,
) -> DiagnosticsReport:
    """Bundle residuals, QQ band, Wald table, and (where defined) QIC."""
    residuals = standardized_residuals(fit)
    qq = qq_band_data(residuals.residuals, n_sim=n_sim, level=level, seed=seed)
    qic_part = None
    if include_qic and fit.state._ctx.spec.family.kind != "binomial":
        qic_part = qic(fit, bundle)
    return DiagnosticsReport(
        qic=qic_part,
        residuals=residuals,
        qq=qq,
        wald=tuple(wald_table(fit)),
    )
