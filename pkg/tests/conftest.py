import numpy as np

from emprates import Dataset


def make_dataset(
    rng,
    n_per_arm=(30, 30),
    rate=1.0,
    dispersion=0.5,
    n_covariates=0,
    strata=None,
):
    """A small NB-distributed dataset for exercising the estimators."""
    arms, counts, exposures, covs = [], [], [], []
    for a, n in enumerate(n_per_arm):
        d = rng.uniform(0.5, 1.5, size=n)
        mu = rate * d
        if dispersion > 0:
            g = rng.gamma(shape=1.0 / dispersion, scale=dispersion, size=n)
            y = rng.poisson(mu * g)
        else:
            y = rng.poisson(mu)
        arms.append(np.full(n, a))
        counts.append(y)
        exposures.append(d)
        if n_covariates:
            covs.append(rng.standard_normal((n, n_covariates)))
    return Dataset.from_arrays(
        arm=np.concatenate(arms),
        count=np.concatenate(counts),
        exposure=np.concatenate(exposures),
        covariates=np.vstack(covs) if n_covariates else None,
        covariate_names=tuple(f"x{i}" for i in range(n_covariates))
        if n_covariates
        else None,
        strata=strata,
    )
