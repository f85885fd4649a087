"""Monte Carlo study: Poisson crossover data with sinusoidal time and
carry-over effects, competing fits, and coverage/RMSE summaries.

The generator follows the two-sequence, three-period design with an extra
period (ABA / BAB) and a first-order carry-over of treatment A. Responses
are Poisson with log link; intra-subject dependence is induced through a
Gaussian copula with ar1 latent correlation over each subject's stacked
observation vector, which preserves the Poisson marginals. Each replicate
derives its own generator from (seed, replicate_index), so results do not
depend on execution order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .data import LongitudinalDataset, Observation, SubjectRecord
from .design import ModelSpec, SplineConfig, build_design
from .errors import CrossgeeError
from .estimator import fit
from .families import Family

GEE_S = "gee-s"
GEE_1 = "gee-1"
GEE_2 = "gee-2"
MODELS = (GEE_S, GEE_1, GEE_2)

# default components tracked by the study: treatment and the two period effects
_COMPONENTS = ("treatment:B", "period:2", "period:3")

_Z975 = float(stats.norm.ppf(0.975))


@dataclass(frozen=True)
class Scenario:
    """One cell of the study grid.

    Per replicate, the intercept and the two sinusoid amplitudes are fresh
    N(0,1) draws; ``beta1`` (the A-vs-B contrast) and the period effects
    are fixed.
    """

    n_per_sequence: int
    beta1: float
    replicates: int
    seed: int = 0
    period_effects: tuple[float, float] = (3.0, 3.0)
    n_obs_per_period: int = 15
    sequences: tuple[str, ...] = ("ABA", "BAB")
    carry_treatment: str = "A"
    latent_alpha: float = 0.5

    def time_grid(self) -> np.ndarray:
        # one full sinusoid cycle per period
        return np.linspace(0.0, 2.0 * np.pi, self.n_obs_per_period)

    def true_values(self) -> dict[str, float]:
        return {
            "treatment:B": self.beta1,
            "period:2": self.period_effects[0],
            "period:3": self.period_effects[1],
        }


def _carry_indicator(sequence: str, period: int, carry_treatment: str) -> float:
    if period == 1:
        return 0.0
    return 1.0 if sequence[period - 2] == carry_treatment else 0.0


def simulate_dataset(scenario: Scenario, replicate_index: int) -> LongitudinalDataset:
    """Draw one replicate. Deterministic given (scenario.seed, replicate_index)."""
    rng = np.random.default_rng([scenario.seed, replicate_index])
    beta0, c1, c2 = rng.normal(size=3)
    times = scenario.time_grid()
    n_periods = len(scenario.sequences[0])
    t_total = n_periods * times.size

    lags = np.abs(np.subtract.outer(np.arange(t_total), np.arange(t_total)))
    chol = np.linalg.cholesky(scenario.latent_alpha ** lags)

    subjects = []
    for seq in scenario.sequences:
        for r in range(scenario.n_per_sequence):
            eta = np.empty(t_total)
            cov_rows = []
            pos = 0
            for j in range(1, n_periods + 1):
                trt = seq[j - 1]
                delta = _carry_indicator(seq, j, scenario.carry_treatment)
                eta[pos : pos + times.size] = (
                    beta0
                    + scenario.beta1 * (trt == "B")
                    + scenario.period_effects[0] * (j == 2)
                    + scenario.period_effects[1] * (j == 3)
                    + c1 * np.cos(times)
                    + c2 * np.sin(times) * delta
                )
                cov_rows.extend((j, k + 1, times[k], trt, delta) for k in range(times.size))
                pos += times.size
            mu = np.exp(eta)
            latent = chol @ rng.standard_normal(t_total)
            y = stats.poisson.ppf(stats.norm.cdf(latent), mu)

            observations = []
            for row, (j, k, t, trt, delta) in enumerate(cov_rows):
                observations.append(
                    Observation(
                        period=j,
                        within_index=k,
                        time=float(t),
                        treatment=trt,
                        response=float(y[row]),
                        covariates={
                            "time_lin": float(t),
                            "time_quad": float(t * t),
                            "carry_lin": float(delta * t),
                            "carry_quad": float(delta * t * t),
                        },
                    )
                )
            subjects.append(
                SubjectRecord(
                    subject_id=f"{seq}-{r + 1:03d}",
                    sequence=tuple(seq),
                    observations=tuple(observations),
                )
            )
    return LongitudinalDataset(subjects=tuple(subjects))


def model_spec(model: str, correlation: str = "ar1", spline_degree: int = 3) -> ModelSpec:
    """The three competing specifications fitted in the study."""
    family = Family("poisson", "log")
    if model == GEE_S:
        return ModelSpec(
            family=family,
            correlation=correlation,
            spline=SplineConfig(degree=spline_degree),
            parametric_terms=("intercept", "treatment", "period"),
            carryover=True,
            carryover_reference="B",
        )
    if model == GEE_1:
        terms = ("intercept", "treatment", "period", "time_lin", "carry_lin")
    elif model == GEE_2:
        terms = (
            "intercept",
            "treatment",
            "period",
            "time_lin",
            "time_quad",
            "carry_lin",
            "carry_quad",
        )
    else:
        raise ValueError(f"unknown model {model!r}; expected one of {MODELS}")
    return ModelSpec(
        family=family,
        correlation=correlation,
        spline=None,
        parametric_terms=terms,
        carryover=False,
    )


@dataclass(frozen=True)
class CellSummary:
    model: str
    n_per_sequence: int
    beta1: float
    component: str
    true_value: float
    coverage: float
    rmse: float
    rmse_se: float
    mean_estimate: float
    n_used: int
    n_failed: int


@dataclass(frozen=True)
class StudySummary:
    cells: tuple[CellSummary, ...]

    def cell(self, model: str, n: int, beta1: float, component: str) -> CellSummary:
        for c in self.cells:
            if (
                c.model == model
                and c.n_per_sequence == n
                and c.beta1 == beta1
                and c.component == component
            ):
                return c
        raise KeyError((model, n, beta1, component))

    def rmse_series(self, model: str, beta1: float, component: str):
        """(n values, RMSE values, RMSE standard errors), sorted by n."""
        rows = sorted(
            (c.n_per_sequence, c.rmse, c.rmse_se)
            for c in self.cells
            if c.model == model and c.beta1 == beta1 and c.component == component
        )
        ns, rmse, se = zip(*rows)
        return np.array(ns), np.array(rmse), np.array(se)


def run_study(
    scenarios: Sequence[Scenario],
    models: Sequence[str] = MODELS,
    components: Sequence[str] = _COMPONENTS,
) -> StudySummary:
    """Fit every model on every replicate of every scenario and aggregate.

    Replicates where a model fails (hard error or non-convergence) are
    excluded from that model's aggregates and counted in ``n_failed``.
    """
    cells = []
    for scen in scenarios:
        truth = scen.true_values()
        estimates = {m: {c: [] for c in components} for m in models}
        covered = {m: {c: [] for c in components} for m in models}
        failures = {m: 0 for m in models}
        for rep in range(scen.replicates):
            dataset = simulate_dataset(scen, rep)
            for m in models:
                spec = model_spec(m)
                try:
                    bundle = build_design(dataset, spec)
                    result = fit(bundle, spec)
                    if not result.converged or result.cov_robust is None:
                        raise CrossgeeError("fit did not converge")
                    se = np.sqrt(np.diag(result.cov_robust))
                    for comp in components:
                        j = result.beta_labels.index(comp)
                        est = float(result.beta[j])
                        estimates[m][comp].append(est)
                        covered[m][comp].append(
                            abs(est - truth[comp]) <= _Z975 * float(se[j])
                        )
                except (CrossgeeError, np.linalg.LinAlgError):
                    failures[m] += 1

        for m in models:
            for comp in components:
                est = np.asarray(estimates[m][comp], dtype=float)
                cov = np.asarray(covered[m][comp], dtype=float)
                n_used = est.size
                if n_used:
                    sq = (est - truth[comp]) ** 2
                    rmse = float(np.sqrt(sq.mean()))
                    # delta method: se(sqrt(MSE)) = se(MSE) / (2 RMSE)
                    se_mse = float(sq.std(ddof=1) / np.sqrt(n_used)) if n_used > 1 else np.nan
                    rmse_se = se_mse / (2.0 * rmse) if rmse > 0 else 0.0
                    coverage = float(cov.mean())
                    mean_est = float(est.mean())
                else:
                    rmse = rmse_se = coverage = mean_est = np.nan
                cells.append(
                    CellSummary(
                        model=m,
                        n_per_sequence=scen.n_per_sequence,
                        beta1=scen.beta1,
                        component=comp,
                        true_value=truth[comp],
                        coverage=coverage,
                        rmse=rmse,
                        rmse_se=rmse_se,
                        mean_estimate=mean_est,
                        n_used=n_used,
                        n_failed=failures[m],
                    )
                )
    return StudySummary(cells=tuple(cells))
