"""Model specification and design-matrix construction.

``build_design`` turns a validated dataset plus a :class:`ModelSpec` into
per-subject design blocks: the parametric matrix ``X`` (reference-level
dummy coding, deterministic column order), the within-period time
covariate feeding the time smooth, and one carry indicator column per
non-reference treatment feeding the carry-over smooths. Carry indicators
are identically zero in period 1; in later periods they flag observations
whose previous-period treatment was the carried one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LongitudinalDataset
from .errors import ConfigError, UnknownCovariateError
from .families import Family

CATEGORICAL_TERMS = ("period", "treatment", "sequence")


@dataclass(frozen=True)
class SplineConfig:
    """Shared basis settings for the time and carry-over smooths.

    ``basis_size`` None means the paper default max(n_ij), resolved when
    the data are seen.
    """

    degree: int = 3
    basis_size: int | None = None

    def __post_init__(self):
        if self.degree < 0:
            raise ConfigError("spline degree must be nonnegative")
        if self.basis_size is not None and self.basis_size < self.degree + 1:
            raise ConfigError(
                f"basis_size {self.basis_size} must be at least degree+1={self.degree + 1}"
            )


@dataclass(frozen=True)
class ModelSpec:
    """Everything needed to fit: family, working correlation, smooths, terms."""

    family: Family
    correlation: str = "independence"
    spline: SplineConfig | None = field(default_factory=SplineConfig)
    parametric_terms: tuple[str, ...] = ("intercept", "period", "treatment")
    carryover: bool = False
    carryover_reference: str | None = None
    max_iterations: int = 200
    tolerance: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "parametric_terms", tuple(self.parametric_terms))
        if self.correlation not in ("independence", "exchangeable", "ar1"):
            raise ConfigError(f"unknown working correlation {self.correlation!r}")
        if self.tolerance <= 0:
            raise ConfigError("tolerance must be positive")
        # 0 is allowed: fit() then reports the initialized state as non-converged
        if self.max_iterations < 0:
            raise ConfigError("max_iterations must be nonnegative")
        if not self.parametric_terms:
            raise ConfigError("at least one parametric term is required")
        if len(set(self.parametric_terms)) != len(self.parametric_terms):
            raise ConfigError("parametric terms must be unique")
        if self.carryover and self.carryover_reference is None:
            raise ConfigError("carryover requires a reference treatment")
        if self.carryover and self.spline is None:
            raise ConfigError("carry-over smooths need a spline configuration")


@dataclass(frozen=True)
class SubjectDesign:
    """One subject's design blocks, rows ordered by (period, time)."""

    subject_id: str
    X: np.ndarray                 # (T, p)
    times: np.ndarray             # (T,) within-period clock, feeds the time smooth
    carry_indicators: np.ndarray  # (T, n_carry) 0/1; the carry smooths share `times`
    y: np.ndarray                 # (T,)
    obs_index: tuple[tuple[int, int], ...]  # (period, within_index) per row

    def __post_init__(self):
        for name in ("X", "times", "carry_indicators", "y"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def n_obs(self) -> int:
        return self.y.size


@dataclass(frozen=True)
class DesignBundle:
    subjects: tuple[SubjectDesign, ...]
    column_labels: tuple[str, ...]
    carry_treatments: tuple[str, ...]
    max_obs_per_period: int

    @property
    def p(self) -> int:
        return len(self.column_labels)

    @property
    def n_obs(self) -> int:
        return sum(s.n_obs for s in self.subjects)

    def all_times(self) -> np.ndarray:
        return np.concatenate([s.times for s in self.subjects])

    def responses(self) -> np.ndarray:
        return np.concatenate([s.y for s in self.subjects])

    def stacked_X(self) -> np.ndarray:
        return np.vstack([s.X for s in self.subjects])


def _categorical_levels(dataset: LongitudinalDataset, term: str) -> list[str]:
    if term == "period":
        return [str(j) for j in range(1, dataset.n_periods + 1)]
    if term == "treatment":
        return list(dataset.treatments)
    seqs = sorted({"".join(s.sequence) for s in dataset.subjects})
    return seqs


def build_design(dataset: LongitudinalDataset, spec: ModelSpec) -> DesignBundle:
    """Construct per-subject design blocks in deterministic column order.

    Categorical terms use reference-level dummy coding: the first level in
    the declared order (periods numerically, treatments and sequences
    lexicographically) is dropped and the remaining levels get one column
    each, labeled ``term:level``.
    """
    known_covariates = set(dataset.covariate_names())
    levels = {term: _categorical_levels(dataset, term) for term in CATEGORICAL_TERMS}

    labels: list[str] = []
    for term in spec.parametric_terms:
        if term == "intercept":
            labels.append("intercept")
        elif term in CATEGORICAL_TERMS:
            labels.extend(f"{term}:{lv}" for lv in levels[term][1:])
        elif term in known_covariates:
            labels.append(term)
        else:
            raise UnknownCovariateError(
                f"parametric term {term!r} is neither a built-in term nor a dataset "
                f"covariate (available: {sorted(known_covariates)})"
            )

    carry_treatments: tuple[str, ...] = ()
    if spec.carryover:
        ref = spec.carryover_reference
        if ref not in dataset.treatments:
            raise ConfigError(
                f"carry-over reference treatment {ref!r} does not occur in the design "
                f"(treatments: {dataset.treatments})"
            )
        carry_treatments = tuple(t for t in dataset.treatments if t != ref)

    subjects = []
    for subj in dataset.subjects:
        obs = sorted(subj.observations, key=lambda o: (o.period, o.time))
        rows = []
        for o in obs:
            row: list[float] = []
            for term in spec.parametric_terms:
                if term == "intercept":
                    row.append(1.0)
                elif term in CATEGORICAL_TERMS:
                    value = (
                        str(o.period)
                        if term == "period"
                        else (o.treatment if term == "treatment" else "".join(subj.sequence))
                    )
                    row.extend(1.0 if value == lv else 0.0 for lv in levels[term][1:])
                else:
                    try:
                        row.append(float(o.covariates[term]))
                    except KeyError:
                        raise UnknownCovariateError(
                            f"subject {subj.subject_id!r}: covariate {term!r} missing at "
                            f"period {o.period}, k={o.within_index}"
                        ) from None
            rows.append(row)

        delta = np.zeros((len(obs), len(carry_treatments)))
        for ci, trt in enumerate(carry_treatments):
            for r, o in enumerate(obs):
                if o.period > 1 and subj.sequence[o.period - 2] == trt:
                    delta[r, ci] = 1.0

        subjects.append(
            SubjectDesign(
                subject_id=subj.subject_id,
                X=np.asarray(rows, dtype=float),
                times=np.array([o.time for o in obs], dtype=float),
                carry_indicators=delta,
                y=np.array([o.response for o in obs], dtype=float),
                obs_index=tuple((o.period, o.within_index) for o in obs),
            )
        )

    return DesignBundle(
        subjects=tuple(subjects),
        column_labels=tuple(labels),
        carry_treatments=carry_treatments,
        max_obs_per_period=dataset.max_obs_per_period,
    )
