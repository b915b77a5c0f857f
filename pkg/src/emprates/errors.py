"""Exception hierarchy for emprates.

Every error carries an ``exit_code`` so the command line layer can map
failures onto its contract: 2 for usage problems, 3 for bad input data,
4 for numerical failures.
"""

from __future__ import annotations


class EmpratesError(Exception):
    """Base class for all package errors."""

    exit_code: int = 1


class DataError(EmpratesError):
    """Invalid input data (records, files, schemas)."""

    exit_code = 3


class NumericalError(EmpratesError):
    """A computation failed or is not defined for the given input."""

    exit_code = 4


class UsageError(EmpratesError):
    """Invalid configuration or arguments supplied by the caller."""

    exit_code = 2


# --- data validation ---------------------------------------------------


class NegativeCountError(DataError):
    """An event count is negative or not an integer."""


class NonPositiveExposureError(DataError):
    """An exposure is zero, negative, or not finite."""


class RaggedCovariatesError(DataError):
    """Covariate vectors differ in length or contain missing values."""


class ArmTooSmallError(DataError):
    """An arm has fewer than two subjects."""


class UnknownArmIndexError(DataError):
    """An arm index falls outside the declared range."""


class SchemaError(DataError):
    """A delimited input file does not match the expected schema."""


# --- linear models ------------------------------------------------------


class RankDeficientError(NumericalError):
    """The design matrix does not have full column rank."""

    def __init__(self, message: str, columns: tuple[str, ...] = ()):
        super().__init__(message)
        self.columns = columns


class LeverageOneError(NumericalError):
    """A leverage of one makes the HC3 weight undefined."""


# --- rate inference -----------------------------------------------------


class NonPositiveRateError(NumericalError):
    """A rate estimate is not strictly positive, so its log is undefined."""

    def __init__(self, message: str, arms: tuple[int, ...] = ()):
        super().__init__(message)
        self.arms = arms


class ZeroEventsArmError(NonPositiveRateError):
    """An arm with zero observed events; its rate is exactly zero."""


class DegenerateVarianceError(NumericalError):
    """A contrast variance is zero or negative."""


# --- negative binomial fitting -------------------------------------------


class SingularInformationError(NumericalError):
    """The observed information matrix is numerically singular."""


class EmptyArmError(NumericalError):
    """A marginalization step found no subjects in an arm."""


# --- meta-analysis --------------------------------------------------------


class EmptyInputError(NumericalError):
    """A pooling operation received no stratum results."""


class NonPositiveLambdaError(NumericalError):
    """A pooled or per-stratum rate ratio is not strictly positive."""


# --- simulation ------------------------------------------------------------


class UnachievableCorrelationError(NumericalError):
    """No latent correlation in [0, 0.999] reproduces the target."""


class UnknownCaseError(UsageError):
    """An unknown scenario preset identifier."""
