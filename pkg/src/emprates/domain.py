"""Core data containers for subject-level count data and rate estimates.

A :class:`Dataset` is the validated, deterministically ordered form that
every estimator consumes.  It keeps the subject-level columns as numpy
arrays and caches per-arm aggregates (subject counts, total events, total
exposure, mean exposure).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ArmTooSmallError,
    NegativeCountError,
    NonPositiveExposureError,
    RaggedCovariatesError,
    UnknownArmIndexError,
)

_PSD_TOL = 1e-8

METHOD_TAGS = ("aggregated", "ancova", "anhecova", "nb_gcomp", "nb_aipw")


@dataclass(frozen=True)
class SubjectRecord:
    """One subject: arm assignment, event count, exposure, covariates."""

    subject_id: str
    arm: int
    count: int
    exposure: float
    covariates: tuple[float, ...] = ()
    stratum: str | None = None


@dataclass(frozen=True, eq=False)
class Dataset:
    """Validated subject-level data, ordered by (arm, subject_id).

    Construct through :func:`validate_dataset` or :meth:`Dataset.from_arrays`;
    the raw constructor performs no checks.
    """

    arm: np.ndarray
    count: np.ndarray
    exposure: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple[str, ...]
    subject_ids: tuple[str, ...]
    strata: tuple[str, ...] | None
    arm_count: int
    n_per_arm: np.ndarray = field(repr=False)
    events_per_arm: np.ndarray = field(repr=False)
    exposure_per_arm: np.ndarray = field(repr=False)

    @classmethod
    def from_arrays(
        cls,
        arm: np.ndarray,
        count: np.ndarray,
        exposure: np.ndarray,
        covariates: np.ndarray | None = None,
        covariate_names: Sequence[str] | None = None,
        subject_ids: Sequence[str] | None = None,
        strata: Sequence[str] | None = None,
        arm_count: int | None = None,
    ) -> "Dataset":
        """Validate columnar data and build a dataset.

        This is the fast path used by the simulation layer; it performs the
        same checks as :func:`validate_dataset` but vectorized.
        """
        arm = np.asarray(arm)
        count_f = np.asarray(count, dtype=float)
        exposure = np.asarray(exposure, dtype=float)
        n = arm.shape[0]

        if not np.issubdtype(arm.dtype, np.integer):
            if np.any(arm != np.floor(arm)):
                raise UnknownArmIndexError("arm indices must be integers")
            arm = arm.astype(np.int64)
        else:
            arm = arm.astype(np.int64)

        if count_f.shape != (n,) or exposure.shape != (n,):
            raise RaggedCovariatesError(
                "count and exposure must have one entry per subject"
            )
        bad = ~np.isfinite(count_f) | (count_f < 0) | (count_f != np.floor(count_f))
        if np.any(bad):
            j = int(np.flatnonzero(bad)[0])
            raise NegativeCountError(
                f"count must be a nonnegative integer; offending entry {j}: "
                f"{count_f[j]!r}"
            )
        count = count_f.astype(np.int64)
        bad = ~np.isfinite(exposure) | (exposure <= 0)
        if np.any(bad):
            j = int(np.flatnonzero(bad)[0])
            raise NonPositiveExposureError(
                f"exposure must be positive and finite; offending entry {j}: "
                f"{exposure[j]!r}"
            )

        if covariates is None:
            covariates = np.empty((n, 0))
        covariates = np.asarray(covariates, dtype=float)
        if covariates.ndim == 1:
            covariates = covariates[:, None]
        if covariates.shape[0] != n:
            raise RaggedCovariatesError(
                f"covariate rows ({covariates.shape[0]}) do not match the "
                f"number of subjects ({n})"
            )
        if not np.all(np.isfinite(covariates)):
            j = int(np.flatnonzero(~np.isfinite(covariates).all(axis=1))[0])
            raise RaggedCovariatesError(
                f"covariates contain missing or non-finite values (entry {j}); "
                "impute or drop before validation"
            )
        m = covariates.shape[1]
        if covariate_names is None:
            covariate_names = tuple(f"x{i + 1}" for i in range(m))
        else:
            covariate_names = tuple(str(c) for c in covariate_names)
        if len(covariate_names) != m:
            raise RaggedCovariatesError(
                f"{len(covariate_names)} covariate names for {m} columns"
            )

        if subject_ids is None:
            width = max(1, len(str(max(n - 1, 0))))
            subject_ids = tuple(f"s{str(i).zfill(width)}" for i in range(n))
        else:
            subject_ids = tuple(str(s) for s in subject_ids)
            if len(subject_ids) != n:
                raise RaggedCovariatesError(
                    "subject_ids do not match the number of subjects"
                )
        if strata is not None:
            strata = tuple(str(s) for s in strata)
            if len(strata) != n:
                raise RaggedCovariatesError(
                    "strata do not match the number of subjects"
                )

        if n == 0:
            raise ArmTooSmallError("dataset has no subjects")
        if np.any(arm < 0):
            j = int(np.flatnonzero(arm < 0)[0])
            raise UnknownArmIndexError(f"negative arm index {arm[j]} (entry {j})")
        inferred = int(arm.max()) + 1
        if arm_count is None:
            arm_count = inferred
        elif inferred > arm_count:
            j = int(np.flatnonzero(arm >= arm_count)[0])
            raise UnknownArmIndexError(
                f"arm index {arm[j]} outside declared range 0..{arm_count - 1}"
            )
        if arm_count < 2:
            raise ArmTooSmallError("at least two arms are required")

        order = np.lexsort((np.asarray(subject_ids), arm))
        arm = arm[order]
        count = count[order]
        exposure = exposure[order]
        covariates = covariates[order]
        subject_ids = tuple(subject_ids[i] for i in order)
        if strata is not None:
            strata = tuple(strata[i] for i in order)

        n_per_arm = np.bincount(arm, minlength=arm_count)
        if np.any(n_per_arm < 2):
            a = int(np.flatnonzero(n_per_arm < 2)[0])
            raise ArmTooSmallError(
                f"arm {a} has {n_per_arm[a]} subject(s); need at least 2"
            )
        events_per_arm = np.bincount(arm, weights=count, minlength=arm_count)
        exposure_per_arm = np.bincount(arm, weights=exposure, minlength=arm_count)

        for a in (arm, count, exposure, covariates, n_per_arm, events_per_arm,
                  exposure_per_arm):
            a.setflags(write=False)
        return cls(
            arm=arm,
            count=count,
            exposure=exposure,
            covariates=covariates,
            covariate_names=covariate_names,
            subject_ids=subject_ids,
            strata=strata,
            arm_count=arm_count,
            n_per_arm=n_per_arm,
            events_per_arm=events_per_arm,
            exposure_per_arm=exposure_per_arm,
        )

    @property
    def n(self) -> int:
        return self.arm.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    @property
    def mean_exposure_per_arm(self) -> np.ndarray:
        """Arm-wise mean exposure d-bar_i = d_i. / n_i."""
        return self.exposure_per_arm / self.n_per_arm

    def arm_mask(self, a: int) -> np.ndarray:
        return self.arm == a

    def records(self) -> tuple[SubjectRecord, ...]:
        """Materialize the record view (ordered, one object per subject)."""
        strata = self.strata if self.strata is not None else (None,) * self.n
        return tuple(
            SubjectRecord(
                subject_id=self.subject_ids[j],
                arm=int(self.arm[j]),
                count=int(self.count[j]),
                exposure=float(self.exposure[j]),
                covariates=tuple(float(v) for v in self.covariates[j]),
                stratum=strata[j],
            )
            for j in range(self.n)
        )


def validate_dataset(
    records: Iterable[SubjectRecord],
    covariate_names: Sequence[str] | None = None,
    arm_count: int | None = None,
) -> Dataset:
    """Check record-level invariants and assemble an ordered :class:`Dataset`.

    Counts must be nonnegative integers, exposures positive and finite,
    covariate tuples of one common length with no missing values, and every
    arm index in ``0..arm_count-1`` must hold at least two subjects.
    """
    records = tuple(records)
    if not records:
        raise ArmTooSmallError("dataset has no subjects")
    m = len(records[0].covariates)
    for rec in records:
        if len(rec.covariates) != m:
            raise RaggedCovariatesError(
                f"subject {rec.subject_id!r} has {len(rec.covariates)} "
                f"covariates; expected {m}"
            )
    strata_vals = [rec.stratum for rec in records]
    have = [s is not None for s in strata_vals]
    if any(have) and not all(have):
        j = have.index(False)
        raise RaggedCovariatesError(
            f"subject {records[j].subject_id!r} is missing a stratum label "
            "while other subjects carry one"
        )
    return Dataset.from_arrays(
        arm=np.array([rec.arm for rec in records]),
        count=np.array([rec.count for rec in records], dtype=float),
        exposure=np.array([rec.exposure for rec in records], dtype=float),
        covariates=np.array([rec.covariates for rec in records], dtype=float)
        if m
        else None,
        covariate_names=covariate_names,
        subject_ids=[rec.subject_id for rec in records],
        strata=strata_vals if all(have) else None,
        arm_count=arm_count,
    )


def _check_cov(cov: np.ndarray, dim: int, what: str) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (dim, dim):
        raise ValueError(f"{what} covariance must be {dim}x{dim}")
    if not np.all(np.isfinite(cov)):
        raise ValueError(f"{what} covariance contains non-finite entries")
    scale = max(float(np.abs(cov).max()), 1.0)
    if np.abs(cov - cov.T).max() > _PSD_TOL * scale:
        raise ValueError(f"{what} covariance is not symmetric")
    cov = 0.5 * (cov + cov.T)
    if np.linalg.eigvalsh(cov).min() < -_PSD_TOL * scale:
        raise ValueError(f"{what} covariance is not positive semidefinite")
    cov.setflags(write=False)
    return cov


@dataclass(frozen=True, eq=False)
class RateEstimate:
    """Marginal event rates per arm with a joint covariance.

    ``zero_arms`` lists arms whose estimated rate is not strictly positive;
    those block any log-scale inference downstream.
    """

    rates: np.ndarray
    cov: np.ndarray
    method_tag: str
    zero_arms: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        rates = np.asarray(self.rates, dtype=float)
        if rates.ndim != 1:
            raise ValueError("rates must be a vector")
        if not np.all(np.isfinite(rates)):
            raise ValueError("rates contain non-finite entries")
        rates.setflags(write=False)
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "cov", _check_cov(self.cov, rates.shape[0], "rate"))
        if self.method_tag not in METHOD_TAGS:
            raise ValueError(f"unknown method_tag {self.method_tag!r}")

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


@dataclass(frozen=True, eq=False)
class LogRateEstimate:
    """Log rates theta_i = log r_i with a delta-method covariance."""

    theta: np.ndarray
    cov: np.ndarray
    method_tag: str

    def __post_init__(self) -> None:
        theta = np.asarray(self.theta, dtype=float)
        if not np.all(np.isfinite(theta)):
            raise ValueError("log rates contain non-finite entries")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(
            self, "cov", _check_cov(self.cov, theta.shape[0], "log-rate")
        )


@dataclass(frozen=True)
class RateRatioResult:
    """A two-arm rate ratio with Wald inference on the log scale."""

    numerator_arm: int
    denominator_arm: int
    lambda_hat: float
    se_log: float
    z: float
    p: float
    ci_low: float
    ci_high: float
    alpha: float
    method_tag: str

    def __post_init__(self) -> None:
        if not (0 < self.alpha < 1):
            raise ValueError("alpha must lie in (0, 1)")
        if not (self.ci_low <= self.lambda_hat <= self.ci_high):
            raise ValueError("confidence interval does not bracket the estimate")
