"""GP regression: kernel, posterior, likelihood, hyperparameter fitting."""

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tilkit.gp import (DEGENERATE_MSG, GpModel, KernelHyper, fit_hyperparameters,
                       gp_posterior, kernel_eval, kernel_matrix,
                       log_marginal_likelihood)


def unit_hyper(d, sigma_n=0.0):
    return KernelHyper(1.0, np.ones(d), sigma_n)


# ---------------------------------------------------------------------------
# kernel
# ---------------------------------------------------------------------------

def test_kernel_at_zero_distance():
    h = KernelHyper(1.7, np.array([0.2, 0.5]), 0.1)
    a = np.array([0.3, -0.4])
    assert kernel_eval(a, a.copy(), h) == pytest.approx(1.7 ** 2, abs=0)


def test_kernel_unit_distance_high_precision():
    """Scalar evaluation checked against a 50-digit computation."""
    import mpmath
    mpmath.mp.dps = 50
    r = mpmath.mpf(1)
    expect = float((1 + mpmath.sqrt(5) * r + 5 * r ** 2 / 3)
                   * mpmath.e ** (-mpmath.sqrt(5) * r))
    got = kernel_eval(np.zeros(3), np.array([1.0, 0.0, 0.0]), unit_hyper(3))
    assert got == pytest.approx(expect, abs=1e-14)
    assert got == pytest.approx(0.52399, abs=1e-5)


def test_kernel_ard_removes_dimension():
    h = KernelHyper(1.0, np.array([1.0, 1e9]), 0.0)
    a = np.array([0.5, -3.0])
    b = np.array([0.5, 4.0])  # differs only along the huge length-scale
    assert kernel_eval(a, b, h) == pytest.approx(1.0, abs=1e-9)


def test_kernel_rejects_bad_input():
    with pytest.raises(ValueError):
        kernel_eval(np.array([np.nan, 0.0]), np.zeros(2), unit_hyper(2))
    with pytest.raises(ValueError):
        kernel_eval(np.zeros(3), np.zeros(2), unit_hyper(2))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_kernel_symmetry(a, b):
    h = KernelHyper(0.8, np.array([0.3, 1.0, 2.5]), 0.0)
    a, b = np.array(a), np.array(b)
    assert kernel_eval(a, b, h) == kernel_eval(b, a, h)


def test_gram_psd_with_bounded_jitter():
    rng = np.random.default_rng(4)
    h = KernelHyper(1.2, np.full(5, 0.3), 0.0)
    for trial in range(5):
        X = rng.random((50, 5))
        model = GpModel(X, rng.normal(size=50), h)  # factorization succeeds
        assert model.jitter <= 1e-8


# ---------------------------------------------------------------------------
# posterior
# ---------------------------------------------------------------------------

def test_empty_model_returns_prior():
    h = KernelHyper(2.0, np.ones(3), 0.1)
    model = GpModel(np.empty((0, 3)), [], h)
    mean, var = gp_posterior(model, np.zeros(3))
    assert mean == 0.0
    assert var == pytest.approx(4.0, abs=0)


def test_noiseless_interpolation():
    rng = np.random.default_rng(1)
    X = rng.random((12, 2))
    y = np.sin(3 * X[:, 0]) + X[:, 1]
    model = GpModel(X, y, KernelHyper(1.0, np.array([0.4, 0.4]), 0.0))
    for i in (0, 5, 11):
        mean, var = model.posterior(X[i])
        assert mean == pytest.approx(y[i], abs=1e-10)
        assert var == pytest.approx(0.0, abs=1e-10)


def test_posterior_matches_direct_solve():
    """Cached-factorization path vs an explicit high-precision linear solve."""
    rng = np.random.default_rng(7)
    X = rng.random((20, 12))
    y = rng.normal(size=20)
    h = KernelHyper(1.3, np.full(12, 0.45), 0.07)
    model = GpModel(X, y, h)
    Q = rng.random((8, 12))
    mean, var = model.posterior(Q)

    K = kernel_matrix(X, X, h) + h.sigma_n ** 2 * np.eye(20)
    Ks = kernel_matrix(Q, X, h)
    yc = y - y.mean()
    mean_direct = y.mean() + Ks @ np.linalg.solve(K, yc)
    var_direct = h.sigma_f ** 2 - np.sum(
        Ks * np.linalg.solve(K, Ks.T).T, axis=1)
    np.testing.assert_allclose(mean, mean_direct, atol=1e-8)
    np.testing.assert_allclose(var, var_direct, atol=1e-8)


def test_posterior_variance_bounded_by_prior():
    rng = np.random.default_rng(3)
    X = rng.random((30, 4))
    y = rng.normal(size=30)
    h = KernelHyper(0.9, np.full(4, 0.25), 0.05)
    model = GpModel(X, y, h)
    _, var = model.posterior(rng.random((200, 4)))
    assert np.all(var <= 0.9 ** 2 + 1e-9)
    assert np.all(var >= 0.0)


def test_conditioning_never_increases_variance():
    """Monotone information: an extra training point cannot raise the
    posterior variance anywhere."""
    rng = np.random.default_rng(9)
    h = KernelHyper(1.0, np.full(3, 0.5), 0.1)
    X = rng.random((15, 3))
    y = rng.normal(size=15)
    model_small = GpModel(X, y, h)
    model_big = GpModel(np.vstack([X, rng.random(3)]),
                        np.append(y, rng.normal()), h)
    Q = rng.random((100, 3))
    _, var_small = model_small.posterior(Q)
    _, var_big = model_big.posterior(Q)
    assert np.all(var_big <= var_small + 1e-9)


def test_singular_gram_raises_after_jitter_ladder():
    # coincident points at a signal scale where the max jitter (1e-8) is
    # below the elimination roundoff: no ladder entry can rescue this
    X = np.zeros((30, 2))
    y = np.arange(30.0)
    with pytest.raises(np.linalg.LinAlgError):
        GpModel(X, y, KernelHyper(1e6, np.ones(2), 0.0))


def test_coincident_points_rescued_by_recorded_jitter():
    X = np.zeros((5, 2))
    y = np.full(5, 2.0)
    model = GpModel(X, y, KernelHyper(1.0, np.ones(2), 0.0))
    assert model.jitter > 0.0


# ---------------------------------------------------------------------------
# marginal likelihood and fitting
# ---------------------------------------------------------------------------

def test_single_pair_closed_form():
    h = KernelHyper(0.7, np.ones(1), 0.3)
    got = log_marginal_likelihood(np.array([[0.4]]), np.array([1.2]), h)
    s2 = 0.7 ** 2 + 0.3 ** 2
    expect = -0.5 * 1.2 ** 2 / s2 - 0.5 * math.log(2 * math.pi * s2)
    assert got == pytest.approx(expect, abs=1e-12)


def test_likelihood_gradient_matches_finite_differences():
    rng = np.random.default_rng(12)
    X = rng.random((15, 3))
    y = np.sin(X.sum(axis=1)) + 0.1 * rng.normal(size=15)
    h = KernelHyper(0.9, np.array([0.3, 0.5, 0.8]), 0.1)
    v0, grad = log_marginal_likelihood(X, y, h, grad=True)
    theta = np.log(np.concatenate(([h.sigma_f], h.length_scales,
                                   [h.sigma_n])))
    for i in range(len(theta)):
        tp = theta.copy()
        tp[i] += 1e-7
        t = np.exp(tp)
        vp = log_marginal_likelihood(X, y, KernelHyper(t[0], t[1:-1], t[-1]))
        assert grad[i] == pytest.approx((vp - v0) / 1e-7, rel=1e-3, abs=1e-5)


def sample_gp(rng, h, n, d):
    X = rng.random((n, d))
    K = kernel_matrix(X, X, h) + 1e-12 * np.eye(n)
    y = np.linalg.cholesky(K) @ rng.normal(size=n) \
        + h.sigma_n * rng.normal(size=n)
    return X, y


def test_fit_recovers_known_length_scale():
    """Median recovered length-scale within a factor of 2 over 10 seeds."""
    true = KernelHyper(1.0, np.array([0.5, 0.5]), 0.01)
    ratios = []
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        X, y = sample_gp(rng, true, 60, 2)
        fit = fit_hyperparameters(X, y, restarts=3, seed=seed)
        ratios.append(np.exp(np.mean(np.log(fit.length_scales))) / 0.5)
    med = float(np.median(ratios))
    assert 0.5 <= med <= 2.0


def test_fit_output_scaling():
    """Scaling y by 10 scales sigma_f by ~10 and leaves length-scales put."""
    rng = np.random.default_rng(42)
    true = KernelHyper(1.0, np.array([0.4, 0.6]), 0.05)
    X, y = sample_gp(rng, true, 50, 2)
    fit1 = fit_hyperparameters(X, y, restarts=3, seed=0)
    fit10 = fit_hyperparameters(X, 10.0 * y, restarts=3, seed=0)
    assert fit10.sigma_f == pytest.approx(10.0 * fit1.sigma_f, rel=0.2)
    np.testing.assert_allclose(fit10.length_scales, fit1.length_scales,
                               rtol=0.2)


def test_fit_degenerate_data_warns_and_defaults():
    X = np.random.default_rng(0).random((10, 2))
    with pytest.warns(UserWarning, match="degenerate"):
        hyper = fit_hyperparameters(X, np.full(10, 3.3), restarts=2)
    assert hyper.sigma_f > 0 and np.all(hyper.length_scales > 0)


def test_fit_requires_two_points():
    with pytest.raises(ValueError):
        fit_hyperparameters(np.zeros((1, 2)), [1.0])


def test_hyper_validation():
    with pytest.raises(ValueError):
        KernelHyper(0.0, np.ones(2), 0.1)
    with pytest.raises(ValueError):
        KernelHyper(1.0, np.array([1.0, -1.0]), 0.1)
