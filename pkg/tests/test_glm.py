import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gformula.glm import (
    CLAMP, expit, fit_mle, fit_mle_batch, logit, loglik_bernoulli, loglik_gaussian,
    score_bernoulli, score_gaussian,
)

from oracles import naive_loglik_bernoulli, naive_loglik_gaussian


def random_logistic(rng, n=40, p=3, scale=1.0):
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    beta = rng.normal(scale=scale, size=p)
    y = (rng.random(n) < expit(X @ beta)).astype(float)
    return X, y


# --- expit ------------------------------------------------------------------


def test_expit_examples():
    assert expit(0.0) == 0.5
    for p in (0.1, 0.5, 0.9):
        assert expit(logit(p)) == pytest.approx(p, abs=1e-15)
    assert expit(-1 + 1 + 0.45) == pytest.approx(1 / (1 + math.exp(-0.45)), rel=1e-15)


@given(st.floats(-700, 700), st.floats(-700, 700))
def test_expit_is_monotone_and_bounded(a, b):
    lo, hi = sorted((a, b))
    assert 0.0 <= expit(lo) <= expit(hi) <= 1.0


# --- log-likelihoods ---------------------------------------------------------------


def test_bernoulli_loglik_examples():
    X = np.ones((7, 2))
    assert loglik_bernoulli(np.zeros(2), X, np.zeros(7)) == pytest.approx(7 * math.log(0.5), rel=1e-15)
    assert loglik_bernoulli([logit(0.8)], [[1.0]], [1.0]) == pytest.approx(math.log(0.8), rel=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 12))
def test_bernoulli_loglik_matches_naive_oracle(seed, n):
    rng = np.random.default_rng(seed)
    X, y = random_logistic(rng, n)
    beta = rng.normal(size=3)
    assert loglik_bernoulli(beta, X, y) == pytest.approx(naive_loglik_bernoulli(beta, X, y), rel=1e-12, abs=1e-12)


def test_gaussian_loglik_examples():
    half_log_2pi = 0.5 * math.log(2 * math.pi)
    assert loglik_gaussian([2.0], 1.0, [[1.0]], [2.0]) == pytest.approx(-half_log_2pi, rel=1e-15)
    assert loglik_gaussian([1.0], 1.0, [[1.0]], [2.0]) == pytest.approx(-half_log_2pi - 0.5, rel=1e-15)
    rng = np.random.default_rng(5)
    X = rng.normal(size=(6, 2))
    y = rng.normal(size=6)
    beta = rng.normal(size=2)
    assert loglik_gaussian(beta, 0.7, X, y) == pytest.approx(naive_loglik_gaussian(beta, 0.7, X, y), rel=1e-12)


def test_loglik_errors():
    with pytest.raises(ValueError):
        loglik_gaussian([0.0], 0.0, [[1.0]], [1.0])
    with pytest.raises(ValueError):
        loglik_bernoulli([0.0, 1.0], [[1.0]], [1.0])
    with pytest.raises(ValueError):
        loglik_bernoulli([0.0], [[1.0], [1.0]], [1.0])


def test_weights_act_as_replication():
    rng = np.random.default_rng(2)
    X, y = random_logistic(rng, 10)
    w = rng.integers(0, 4, size=10).astype(float)
    Xr, yr = np.repeat(X, w.astype(int), axis=0), np.repeat(y, w.astype(int))
    beta = rng.normal(size=3)
    assert loglik_bernoulli(beta, X, y, w) == pytest.approx(loglik_bernoulli(beta, Xr, yr), rel=1e-12)


# --- gradients ----------------------------------------------------------------------

H = 1e-6


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def test_bernoulli_score_matches_finite_differences():
    rng = np.random.default_rng(11)
    for _ in range(20):
        X, y = random_logistic(rng, 30)
        beta = rng.normal(size=3)
        g = score_bernoulli(beta, X, y)
        for j in range(3):
            e = np.zeros(3)
            e[j] = H
            fd = (loglik_bernoulli(beta + e, X, y) - loglik_bernoulli(beta - e, X, y)) / (2 * H)
            assert _rel(g[j], fd) <= 1e-5


def test_gaussian_score_matches_finite_differences():
    rng = np.random.default_rng(12)
    for _ in range(20):
        X = np.column_stack([np.ones(25), rng.normal(size=(25, 2))])
        y = rng.normal(size=25)
        beta = rng.normal(size=3)
        sigma = float(rng.uniform(0.5, 2.0))
        g_beta, g_sigma = score_gaussian(beta, sigma, X, y)
        for j in range(3):
            e = np.zeros(3)
            e[j] = H
            fd = (loglik_gaussian(beta + e, sigma, X, y) - loglik_gaussian(beta - e, sigma, X, y)) / (2 * H)
            assert _rel(g_beta[j], fd) <= 1e-5
        fd = (loglik_gaussian(beta, sigma + H, X, y) - loglik_gaussian(beta, sigma - H, X, y)) / (2 * H)
        assert _rel(g_sigma, fd) <= 1e-5


# --- fit_mle --------------------------------------------------------------------


def test_intercept_only_mle_is_logit_of_mean():
    y = np.array([1, 0, 0, 0] * 5, dtype=float)
    fit = fit_mle(np.ones((20, 1)), y)
    assert fit.converged and not fit.divergence_flag
    assert fit.coefficients[0] == pytest.approx(logit(0.25), abs=1e-9)


def saturated_2x2(rng, n=200):
    x = (rng.random(n) < 0.5).astype(float)
    l = (rng.random(n) < 0.5).astype(float)
    y = (rng.random(n) < 0.2 + 0.3 * x + 0.2 * l).astype(float)
    X = np.column_stack([np.ones(n), x, l, x * l])
    return X, x, l, y


def test_saturated_fit_reproduces_cell_means():
    rng = np.random.default_rng(4)
    X, x, l, y = saturated_2x2(rng)
    fit = fit_mle(X, y)
    p = expit(X @ fit.coefficients)
    for xv in (0, 1):
        for lv in (0, 1):
            cell = (x == xv) & (l == lv)
            assert np.allclose(p[cell], y[cell].mean(), atol=1e-8)


def test_separation_sets_flag_at_clamp():
    x = np.array([0, 0, 0, 1, 1, 1], dtype=float)
    X = np.column_stack([np.ones(6), x])
    fit = fit_mle(X, x.copy())
    assert fit.divergence_flag
    assert np.all(np.abs(fit.coefficients) <= CLAMP)
    assert np.any(np.isclose(np.abs(fit.coefficients), CLAMP))


def test_constant_outcome_flags_instead_of_raising():
    fit = fit_mle(np.ones((5, 1)), np.ones(5))
    assert fit.divergence_flag and np.isfinite(fit.coefficients).all()


def test_empty_data_raises():
    with pytest.raises(ValueError):
        fit_mle(np.ones((0, 2)), np.ones(0))


def test_collinear_design_survives_via_ridge():
    rng = np.random.default_rng(9)
    x = (rng.random(30) < 0.5).astype(float)
    X = np.column_stack([np.ones(30), x, x])
    y = (rng.random(30) < 0.4).astype(float)
    fit = fit_mle(X, y)
    assert np.isfinite(fit.coefficients).all()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(3, 40), st.floats(0.1, 4.0))
def test_irls_loglik_is_monotone(seed, n, scale):
    rng = np.random.default_rng(seed)
    X, y = random_logistic(rng, n, scale=scale)
    fit = fit_mle(X, y)
    h = np.asarray(fit.history)
    assert len(h) == fit.iterations + 1
    assert np.all(np.diff(h) >= -1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_mle_is_row_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    X, y = random_logistic(rng, 60, scale=0.5)
    perm = rng.permutation(60)
    a = fit_mle(X, y)
    b = fit_mle(X[perm], y[perm])
    if not a.divergence_flag:
        assert np.allclose(a.coefficients, b.coefficients, atol=1e-10, rtol=0)


def test_gaussian_fit_is_least_squares():
    rng = np.random.default_rng(1)
    X = np.column_stack([np.ones(50), rng.normal(size=(50, 2))])
    y = X @ [0.3, -1.0, 2.0] + rng.normal(scale=0.5, size=50)
    fit = fit_mle(X, y, "gaussian")
    ls = np.linalg.lstsq(X, y, rcond=None)[0]
    assert np.allclose(fit.coefficients, ls, atol=1e-8)
    assert fit.sigma == pytest.approx(math.sqrt(np.mean((y - X @ ls) ** 2)), rel=1e-8)


def test_batch_frequency_weights_match_expanded_data():
    rng = np.random.default_rng(8)
    X, y = random_logistic(rng, 25, scale=0.5)
    W = rng.multinomial(25, np.full(25, 1 / 25), size=4).astype(float)
    fits = fit_mle_batch(X, y, "bernoulli", W)
    for w, f in zip(W, fits):
        idx = np.repeat(np.arange(25), w.astype(int))
        ref = fit_mle(X[idx], y[idx])
        assert f.divergence_flag == ref.divergence_flag
        assert np.allclose(f.coefficients, ref.coefficients, atol=1e-8)
