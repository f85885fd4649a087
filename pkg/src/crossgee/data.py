"""Long-format crossover dataset types.

The layout is one :class:`Observation` per measured response: subject i,
period j, within-period index k, measurement time, applied treatment and
response value, plus optional named baseline covariates. A
:class:`SubjectRecord` carries the subject's treatment sequence; the
sequence is the ground truth the per-observation treatments are validated
against. All types are immutable after construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import DataValidationError


@dataclass(frozen=True)
class Observation:
    period: int
    within_index: int
    time: float
    treatment: str
    response: float
    covariates: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    sequence: tuple[str, ...]
    observations: tuple[Observation, ...]

    def __post_init__(self):
        object.__setattr__(self, "sequence", tuple(self.sequence))
        object.__setattr__(self, "observations", tuple(self.observations))

    @property
    def n_periods(self) -> int:
        return len(self.sequence)

    def period_observations(self, period: int) -> tuple[Observation, ...]:
        return tuple(o for o in self.observations if o.period == period)


@dataclass(frozen=True)
class LongitudinalDataset:
    """Validated collection of subjects.

    Invariants enforced at construction:

    * period indices per subject are 1..P with no gaps and at least one
      observation each;
    * within a (subject, period), times are strictly increasing and
      (period, within_index) pairs are unique;
    * each observation's treatment equals the sequence entry for its period.
    """

    subjects: tuple[SubjectRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        if not self.subjects:
            raise DataValidationError("dataset has no subjects")
        seen_ids = set()
        for subj in self.subjects:
            if subj.subject_id in seen_ids:
                raise DataValidationError(f"duplicate subject id {subj.subject_id!r}")
            seen_ids.add(subj.subject_id)
            self._validate_subject(subj)

    @staticmethod
    def _validate_subject(subj: SubjectRecord) -> None:
        sid = subj.subject_id
        p = subj.n_periods
        if p == 0:
            raise DataValidationError(f"subject {sid!r}: empty treatment sequence")
        if not subj.observations:
            raise DataValidationError(f"subject {sid!r}: no observations")
        periods = sorted({o.period for o in subj.observations})
        if periods != list(range(1, p + 1)):
            raise DataValidationError(
                f"subject {sid!r}: observed periods {periods} do not form 1..{p}"
            )
        seen_jk = set()
        for o in subj.observations:
            if (o.period, o.within_index) in seen_jk:
                raise DataValidationError(
                    f"subject {sid!r}: duplicate (period, within_index) "
                    f"({o.period}, {o.within_index})"
                )
            seen_jk.add((o.period, o.within_index))
            expected = subj.sequence[o.period - 1]
            if o.treatment != expected:
                raise DataValidationError(
                    f"subject {sid!r}: period {o.period} observation carries treatment "
                    f"{o.treatment!r} but the sequence assigns {expected!r}"
                )
            if not np.isfinite(o.response):
                raise DataValidationError(
                    f"subject {sid!r}: non-finite response at period {o.period}, "
                    f"k={o.within_index}"
                )
        for j in range(1, p + 1):
            times = [o.time for o in subj.observations if o.period == j]
            if np.any(np.diff(times) <= 0):
                raise DataValidationError(
                    f"subject {sid!r}: times within period {j} are not strictly increasing"
                )

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def treatments(self) -> tuple[str, ...]:
        """All treatment tokens, sorted."""
        toks = set()
        for subj in self.subjects:
            toks.update(subj.sequence)
        return tuple(sorted(toks))

    @property
    def n_periods(self) -> int:
        return max(subj.n_periods for subj in self.subjects)

    @property
    def max_obs_per_period(self) -> int:
        """max(n_ij) over subjects and periods; the default basis size."""
        best = 0
        for subj in self.subjects:
            counts = {}
            for o in subj.observations:
                counts[o.period] = counts.get(o.period, 0) + 1
            best = max(best, max(counts.values()))
        return best

    def all_times(self) -> np.ndarray:
        """Observation times pooled over subjects, in dataset order."""
        return np.array(
            [o.time for subj in self.subjects for o in subj.observations], dtype=float
        )

    def covariate_names(self) -> tuple[str, ...]:
        names = set()
        for subj in self.subjects:
            for o in subj.observations:
                names.update(o.covariates.keys())
        return tuple(sorted(names))
