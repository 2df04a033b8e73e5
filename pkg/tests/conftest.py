"""Shared fixtures and small builders used across the test modules."""

import numpy as np
import pytest

from surveymc.data_model import SampleData
from surveymc.simulation import SimConfig, generate_population


def make_sample(
    rng,
    n=30,
    n_items=6,
    n_covariates=3,
    response=0.7,
    pi_range=(0.05, 0.5),
    noise=1.0,
):
    """Random partially observed sample with linear signal plus noise.

    Response indicators are Bernoulli(response) unless response is None, in
    which case everything is observed.
    """
    X = rng.normal(0.5, 1.0, (n, n_covariates))
    coef = rng.normal(0.5, 1.0, (n_covariates, n_items))
    y = X @ coef + rng.normal(0.0, noise, (n, n_items))
    if response is None:
        resp = np.ones((n, n_items), dtype=np.int8)
    else:
        resp = (rng.random((n, n_items)) < response).astype(np.int8)
    pi = rng.uniform(pi_range[0], pi_range[1], n)
    return SampleData(
        X=X,
        y=np.where(resp == 1, y, np.nan),
        resp=resp,
        pi=pi,
        pop_size=float(np.sum(1.0 / pi)),
    )


def full_sample_from(sample, y_full):
    """The same rows with every cell observed (for estimators needing full y)."""
    return SampleData(
        X=sample.X,
        y=y_full,
        resp=np.ones_like(sample.resp),
        pi=sample.pi,
        pop_size=sample.pop_size,
    )


@pytest.fixture(scope="session")
def tiny_population():
    cfg = SimConfig(n_units=400, n_items=24, n_covariates=4, rank=2, snr=2.0)
    rng = np.random.default_rng(99)
    return cfg, generate_population(cfg, rng)
