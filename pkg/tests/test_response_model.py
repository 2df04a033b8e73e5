"""Per-item logistic fits: score equations, fallbacks, and clipping."""

import numpy as np
from scipy.special import expit

from surveymc.data_model import SampleData
from surveymc.response_model import (
    DIVERGENCE_BOUND,
    _irls,
    fit_logistic_column,
    fit_response_matrix,
)

from conftest import make_sample


def _random_logistic_instance(rng, n=300, d=3, scale=0.8):
    X = rng.normal(0.0, 1.0, (n, d))
    gamma = rng.normal(0.0, scale, d + 1)
    p = expit(gamma[0] + X @ gamma[1:])
    r = (rng.random(n) < p).astype(float)
    return X, r, gamma


def test_score_equation_zero_at_optimum():
    rng = np.random.default_rng(0)
    for _ in range(100):
        X, r, _ = _random_logistic_instance(rng)
        gamma, converged = fit_logistic_column(X, r)
        if not converged:
            continue
        x1 = np.column_stack([np.ones(len(r)), X])
        score = x1.T @ (r - expit(x1 @ gamma))
        assert np.abs(score).max() <= 1e-6


def test_planted_coefficients_recovered():
    rng = np.random.default_rng(1)
    n = 5000
    X = rng.normal(0.0, 1.0, (n, 3))
    gamma_true = np.array([0.4, 0.5, -0.3, 0.2])
    p = expit(gamma_true[0] + X @ gamma_true[1:])
    r = (rng.random(n) < p).astype(float)
    gamma, converged = fit_logistic_column(X, r)
    assert converged
    np.testing.assert_allclose(gamma, gamma_true, atol=0.15)


def test_irls_loglik_monotone():
    rng = np.random.default_rng(2)
    for _ in range(20):
        X, r, _ = _random_logistic_instance(rng, n=120)
        x1 = np.column_stack([np.ones(len(r)), X])
        _, _, trace = _irls(x1, r, 100, 1e-8)
        diffs = np.diff(trace)
        assert (diffs >= -1e-12).all()


def test_all_observed_column_falls_back():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(40, 2))
    gamma, converged = fit_logistic_column(X, np.ones(40))
    assert not converged
    assert (gamma[1:] == 0).all()
    # intercept-only probability sits at the clipped ceiling
    p = expit(gamma[0])
    assert p > 0.99


def test_all_missing_column_falls_back():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(40, 2))
    gamma, converged = fit_logistic_column(X, np.zeros(40))
    assert not converged
    assert expit(gamma[0]) < 0.02


def test_separable_column_falls_back():
    # perfectly separable responses push the slope beyond any finite optimum
    X = np.linspace(-2, 2, 60).reshape(-1, 1)
    r = (X[:, 0] > 0).astype(float)
    gamma, converged = fit_logistic_column(X, r)
    assert not converged
    assert np.abs(gamma).max() <= DIVERGENCE_BOUND


def test_matrix_fit_clips_probabilities():
    rng = np.random.default_rng(5)
    sample = make_sample(rng, n=150, n_items=8, response=0.6)
    fit = fit_response_matrix(sample, p_clip=0.05)
    assert fit.p_hat.min() >= 0.05
    assert fit.p_hat.max() <= 1 - 0.05 / 2
    assert fit.p_hat.shape == sample.y.shape
    assert fit.gamma.shape == (sample.n_covariates + 1, sample.n_items)


def test_matrix_fit_counts_clipped_cells():
    rng = np.random.default_rng(6)
    sample = make_sample(rng, n=60, n_items=4, response=0.5)
    fit = fit_response_matrix(sample, p_clip=0.45)
    assert fit.clip_count == int(
        np.sum((fit.p_hat <= 0.45) | (fit.p_hat >= 1 - 0.45 / 2))
    )


def test_identical_columns_identical_fits():
    rng = np.random.default_rng(7)
    X = rng.normal(0.5, 1.0, (80, 2))
    r = (rng.random(80) < 0.7).astype(np.int8)
    resp = np.column_stack([r, r])
    y = np.where(resp == 1, rng.normal(size=(80, 2)), np.nan)
    sample = SampleData(X=X, y=y, resp=resp, pi=np.full(80, 0.4), pop_size=200.0)
    fit = fit_response_matrix(sample)
    np.testing.assert_array_equal(fit.gamma[:, 0], fit.gamma[:, 1])
    np.testing.assert_array_equal(fit.p_hat[:, 0], fit.p_hat[:, 1])


def test_single_item_matches_column_fit():
    rng = np.random.default_rng(8)
    X, r, _ = _random_logistic_instance(rng, n=90)
    y = np.where(r == 1, rng.normal(size=90), np.nan).reshape(-1, 1)
    sample = SampleData(X=X, y=y, resp=r.astype(np.int8).reshape(-1, 1),
                        pi=np.full(90, 0.3), pop_size=300.0)
    fit = fit_response_matrix(sample)
    gamma, _ = fit_logistic_column(X, r)
    np.testing.assert_allclose(fit.gamma[:, 0], gamma)


def test_mean_fitted_probability_matches_observed_rate():
    rng = np.random.default_rng(9)
    n = 5000
    X = rng.normal(0.5, 1.0, (n, 3))
    gamma_true = np.array([0.3, 0.4, -0.25, 0.15])
    p = expit(gamma_true[0] + X @ gamma_true[1:])
    resp = (rng.random((n, 1)) < p[:, None]).astype(np.int8)
    y = np.where(resp == 1, rng.normal(size=(n, 1)), np.nan)
    sample = SampleData(X=X, y=y, resp=resp, pi=np.full(n, 0.1), pop_size=5e4)
    fit = fit_response_matrix(sample)
    assert abs(fit.p_hat[:, 0].mean() - resp.mean()) < 0.02
