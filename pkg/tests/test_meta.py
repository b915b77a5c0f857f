import math

import numpy as np
import pytest

from emprates import StratumResult, pool_log, pool_natural
from emprates.errors import EmptyInputError, NonPositiveLambdaError


def _strata(*triples):
    return [
        StratumResult(stratum=f"s{i}", lambda_hat=lam, var_lambda=v, weight=w)
        for i, (lam, v, w) in enumerate(triples)
    ]


def test_natural_pooling_is_the_weighted_mean():
    results = _strata((2.0, 0.04, 100.0), (1.4, 0.09, 50.0))
    pooled = pool_natural(results)
    assert pooled.lambda_hat == pytest.approx(1.8)
    # Var = (100^2*0.04 + 50^2*0.09) / 150^2
    var = (100.0**2 * 0.04 + 50.0**2 * 0.09) / 150.0**2
    assert pooled.se_log == pytest.approx(math.sqrt(var) / 1.8, rel=1e-14)
    assert pooled.method_tag == "pooled_natural"
    assert pooled.numerator_arm == 1 and pooled.denominator_arm == 0


def test_weight_rescaling_leaves_pooling_unchanged():
    base = _strata((2.0, 0.04, 100.0), (1.4, 0.09, 50.0), (1.1, 0.02, 75.0))
    scaled = [
        StratumResult(r.stratum, r.lambda_hat, r.var_lambda, r.weight * 7.5)
        for r in base
    ]
    for pool in (pool_natural, pool_log):
        a, b = pool(base), pool(scaled)
        assert b.lambda_hat == pytest.approx(a.lambda_hat, rel=1e-14)
        assert b.se_log == pytest.approx(a.se_log, rel=1e-14)
        assert b.p == pytest.approx(a.p, rel=1e-12)


def test_single_stratum_passes_through():
    (only,) = _strata((1.6, 0.05, 33.0))
    pooled = pool_natural([only])
    assert pooled.lambda_hat == pytest.approx(1.6, rel=1e-14)
    assert pooled.se_log == pytest.approx(math.sqrt(0.05) / 1.6, rel=1e-14)
    logged = pool_log([only])
    assert logged.lambda_hat == pytest.approx(1.6, rel=1e-14)
    assert logged.se_log == pytest.approx(math.sqrt(0.05) / 1.6, rel=1e-14)


def test_scales_agree_when_strata_are_homogeneous():
    results = _strata((1.500, 0.01, 40.0), (1.512, 0.012, 60.0), (1.494, 0.011, 55.0))
    nat = pool_natural(results)
    log = pool_log(results)
    assert abs(nat.lambda_hat - log.lambda_hat) < 1e-3
    assert abs(nat.se_log - log.se_log) < 1e-3


def test_supplied_log_variance_overrides_delta_method():
    plain = StratumResult("a", 2.0, 0.16, 10.0)
    explicit = StratumResult("a", 2.0, 0.16, 10.0, var_log_lambda=0.09)
    assert plain.log_scale() == (math.log(2.0), 0.16 / 4.0)
    assert explicit.log_scale() == (math.log(2.0), 0.09)
    pooled = pool_log([explicit])
    assert pooled.se_log == pytest.approx(0.3, rel=1e-14)


def test_non_positive_lambda_rejected_on_log_scale():
    ok = StratumResult("a", 1.2, 0.01, 5.0)
    zero = StratumResult("b", 0.0, 0.01, 5.0)
    negative = StratumResult("c", -0.4, 0.01, 5.0)
    with pytest.raises(NonPositiveLambdaError):
        pool_log([ok, zero])
    with pytest.raises(NonPositiveLambdaError):
        pool_natural([ok, negative, StratumResult("d", -2.0, 0.01, 20.0)])
    # natural pooling tolerates a negative stratum if the mean stays positive
    pooled = pool_natural([ok, negative])
    assert pooled.lambda_hat == pytest.approx(0.4)


def test_empty_input_rejected():
    with pytest.raises(EmptyInputError):
        pool_natural([])
    with pytest.raises(EmptyInputError):
        pool_log([])


def test_stratum_result_validation():
    with pytest.raises(ValueError):
        StratumResult("a", math.nan, 0.01, 1.0)
    with pytest.raises(ValueError):
        StratumResult("a", 1.0, 0.01, 0.0)
    with pytest.raises(ValueError):
        StratumResult("a", 1.0, 0.01, -2.0)
    with pytest.raises(ValueError):
        StratumResult("a", 1.0, -0.01, 1.0)
    with pytest.raises(NonPositiveLambdaError):
        pool_natural([StratumResult("a", 1.0, 0.0, 1.0)])


def test_pooled_interval_and_test_are_consistent():
    rng = np.random.default_rng(70)
    for _ in range(25):
        results = _strata(
            *(
                (rng.uniform(0.5, 3.0), rng.uniform(0.005, 0.2), rng.uniform(1, 9))
                for _ in range(rng.integers(1, 5))
            )
        )
        alpha = float(rng.uniform(0.01, 0.2))
        for pool in (pool_natural, pool_log):
            r = pool(results, alpha=alpha)
            assert r.ci_low <= r.lambda_hat <= r.ci_high
            inside = r.ci_low <= 1.0 <= r.ci_high
            assert (r.p < alpha) == (not inside)
