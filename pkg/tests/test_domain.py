import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from conftest import make_dataset
from emprates import Dataset, RateEstimate, SubjectRecord, validate_dataset
from emprates.domain import LogRateEstimate, RateRatioResult
from emprates.errors import (
    ArmTooSmallError,
    NegativeCountError,
    NonPositiveExposureError,
    RaggedCovariatesError,
    UnknownArmIndexError,
)


def _records():
    return [
        SubjectRecord("p3", 1, 2, 1.5, (0.3,)),
        SubjectRecord("p1", 0, 0, 0.8, (1.0,)),
        SubjectRecord("p2", 0, 4, 2.0, (-0.5,)),
        SubjectRecord("p4", 1, 1, 1.2, (0.0,)),
    ]


def test_validate_orders_by_arm_then_subject_id():
    data = validate_dataset(_records())
    assert data.subject_ids == ("p1", "p2", "p3", "p4")
    assert_array_equal(data.arm, [0, 0, 1, 1])
    assert_array_equal(data.count, [0, 4, 2, 1])


def test_input_order_does_not_matter():
    a = validate_dataset(_records())
    b = validate_dataset(reversed(_records()))
    assert_array_equal(a.arm, b.arm)
    assert_array_equal(a.count, b.count)
    assert_array_equal(a.exposure, b.exposure)
    assert_array_equal(a.covariates, b.covariates)
    assert a.subject_ids == b.subject_ids


def test_cached_aggregates_match_recomputation():
    rng = np.random.default_rng(3)
    data = make_dataset(rng, n_per_arm=(17, 23), n_covariates=2)
    for a in range(data.arm_count):
        mask = data.arm == a
        assert data.n_per_arm[a] == mask.sum()
        assert data.events_per_arm[a] == data.count[mask].sum()
        assert data.exposure_per_arm[a] == pytest.approx(
            data.exposure[mask].sum(), abs=0.0
        )
    assert_allclose(
        data.mean_exposure_per_arm,
        data.exposure_per_arm / data.n_per_arm,
        rtol=0,
        atol=0,
    )


def test_validation_is_idempotent():
    data = validate_dataset(_records())
    again = validate_dataset(data.records(), covariate_names=data.covariate_names)
    assert_array_equal(data.arm, again.arm)
    assert_array_equal(data.count, again.count)
    assert_array_equal(data.exposure, again.exposure)
    assert_array_equal(data.covariates, again.covariates)
    assert data.subject_ids == again.subject_ids
    assert data.strata == again.strata


def test_records_round_trip_values():
    data = validate_dataset(_records())
    rec = data.records()[0]
    assert rec == SubjectRecord("p1", 0, 0, 0.8, (1.0,))


def test_negative_count_rejected():
    with pytest.raises(NegativeCountError):
        Dataset.from_arrays(
            arm=[0, 0, 1, 1], count=[1, -1, 0, 2], exposure=[1, 1, 1, 1]
        )


def test_fractional_count_rejected():
    with pytest.raises(NegativeCountError):
        Dataset.from_arrays(
            arm=[0, 0, 1, 1], count=[1, 1.5, 0, 2], exposure=[1, 1, 1, 1]
        )


def test_nonpositive_exposure_rejected():
    for bad in (0.0, -1.0, np.inf, np.nan):
        with pytest.raises(NonPositiveExposureError):
            Dataset.from_arrays(
                arm=[0, 0, 1, 1], count=[1, 1, 0, 2], exposure=[1, bad, 1, 1]
            )


def test_missing_covariate_rejected():
    with pytest.raises(RaggedCovariatesError):
        Dataset.from_arrays(
            arm=[0, 0, 1, 1],
            count=[1, 1, 0, 2],
            exposure=[1, 1, 1, 1],
            covariates=[[1.0], [np.nan], [0.0], [2.0]],
        )


def test_ragged_covariates_rejected():
    records = _records()
    records[2] = SubjectRecord("p2", 0, 4, 2.0, (-0.5, 9.0))
    with pytest.raises(RaggedCovariatesError):
        validate_dataset(records)


def test_partial_strata_rejected():
    records = _records()
    records[0] = SubjectRecord("p3", 1, 2, 1.5, (0.3,), stratum="s1")
    with pytest.raises(RaggedCovariatesError):
        validate_dataset(records)


def test_small_arm_rejected():
    with pytest.raises(ArmTooSmallError):
        Dataset.from_arrays(arm=[0, 0, 1], count=[1, 1, 0], exposure=[1, 1, 1])
    with pytest.raises(ArmTooSmallError):
        Dataset.from_arrays(arm=[0, 0, 0, 0], count=[1, 1, 0, 1],
                            exposure=[1, 1, 1, 1])
    with pytest.raises(ArmTooSmallError):
        validate_dataset([])


def test_arm_index_outside_declared_range():
    with pytest.raises(UnknownArmIndexError):
        Dataset.from_arrays(
            arm=[0, 0, 2, 2], count=[1, 1, 0, 2], exposure=[1, 1, 1, 1],
            arm_count=2,
        )
    with pytest.raises(UnknownArmIndexError):
        Dataset.from_arrays(
            arm=[0, 0, -1, 1], count=[1, 1, 0, 2], exposure=[1, 1, 1, 1]
        )
    # a declared empty arm is an arm with fewer than two subjects
    with pytest.raises(ArmTooSmallError):
        Dataset.from_arrays(
            arm=[0, 0, 1, 1], count=[1, 1, 0, 2], exposure=[1, 1, 1, 1],
            arm_count=3,
        )


def test_arrays_are_read_only():
    data = validate_dataset(_records())
    with pytest.raises(ValueError):
        data.count[0] = 5


def test_rate_estimate_validation():
    good = RateEstimate(
        rates=np.array([1.0, 2.0]),
        cov=np.array([[0.1, 0.0], [0.0, 0.2]]),
        method_tag="aggregated",
    )
    assert_allclose(good.se, [np.sqrt(0.1), np.sqrt(0.2)])
    with pytest.raises(ValueError):
        RateEstimate(rates=np.array([1.0, 2.0]), cov=np.eye(2), method_tag="ols")
    with pytest.raises(ValueError):
        RateEstimate(
            rates=np.array([1.0, 2.0]),
            cov=np.array([[0.1, 0.5], [0.5, 0.1]]),  # negative eigenvalue
            method_tag="aggregated",
        )
    with pytest.raises(ValueError):
        RateEstimate(
            rates=np.array([1.0, 2.0]),
            cov=np.array([[0.1, 0.3], [0.0, 0.2]]),  # asymmetric
            method_tag="aggregated",
        )
    with pytest.raises(ValueError):
        RateEstimate(
            rates=np.array([1.0, np.inf]), cov=np.eye(2), method_tag="ancova"
        )


def test_log_rate_estimate_validation():
    with pytest.raises(ValueError):
        LogRateEstimate(theta=np.array([0.0, np.nan]), cov=np.eye(2),
                        method_tag="ancova")


def test_rate_ratio_result_validation():
    with pytest.raises(ValueError):
        RateRatioResult(1, 0, 2.0, 0.1, 1.0, 0.3, 2.5, 3.0, 0.05, "ancova")
    with pytest.raises(ValueError):
        RateRatioResult(1, 0, 2.0, 0.1, 1.0, 0.3, 1.5, 3.0, 1.5, "ancova")
