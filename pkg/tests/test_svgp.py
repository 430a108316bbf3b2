import numpy as np
import pytest

from cfdgp import errors
from cfdgp.gpcore import ExactGPModel, KernelSpec, gp_predict, kernel_eval
from cfdgp.svgp import choose_inducing, init_layer, svgp_kl, svgp_marginal

from oracles import gauss_kl_dense


def layer_at(Z, variance=1.0, ls=1.0, jitter=1e-10):
    Z = np.asarray(Z, dtype=float)
    layer = init_layer(Z, Z.shape[0], Z=Z, variance=variance, lengthscales=[ls] * Z.shape[1],
                       jitter=jitter)
    K = kernel_eval(layer.kernel, Z)
    return layer, K


def test_prior_recovered_when_q_equals_prior():
    Z = np.linspace(0, 4, 6)[:, None]
    layer, K = layer_at(Z)
    layer = layer.with_q(np.zeros(6), K)
    X = np.linspace(-1, 5, 9)[:, None]
    pred = svgp_marginal(layer, X, full_cov=True)
    np.testing.assert_allclose(pred.mean, 0.0, atol=1e-12)
    np.testing.assert_allclose(pred.covariance, kernel_eval(layer.kernel, X), atol=1e-8)


def test_matches_exact_posterior_with_inducing_at_data():
    X = np.linspace(0, 9, 10)[:, None]
    rng = np.random.default_rng(0)
    Y = np.sin(X[:, 0]) + 0.1 * rng.normal(size=10)
    noise = 0.05
    layer, K = layer_at(X)
    A = np.linalg.solve(K + noise * np.eye(10), K)
    layer = layer.with_q(A.T @ Y, K - K @ A)
    exact = gp_predict(ExactGPModel(X, Y, layer.kernel, noise), np.linspace(-1, 10, 23)[:, None])
    approx = svgp_marginal(layer, np.linspace(-1, 10, 23)[:, None])
    np.testing.assert_allclose(approx.mean, exact.mean, rtol=1e-6, atol=1e-6 * np.abs(exact.mean).max())
    np.testing.assert_allclose(approx.variance, exact.variance, rtol=1e-6)


def test_deterministic_inducing_values():
    Z = np.linspace(0, 3, 4)[:, None]
    layer, _ = layer_at(Z, jitter=1e-12)
    m = np.array([0.3, -1.0, 2.0, 0.5])
    layer = layer.with_q(m, 1e-14 * np.eye(4))
    pred = svgp_marginal(layer, Z)
    np.testing.assert_allclose(pred.mean, m, atol=1e-8)
    assert np.all(pred.variance < 1e-8)


def test_kl_zero_for_identical_distributions():
    Z = np.linspace(0, 3, 5)[:, None]
    layer, K = layer_at(Z)
    assert abs(svgp_kl(layer.with_q(np.zeros(5), K))) < 1e-8


def test_kl_mean_shift_only():
    Z = np.linspace(0, 3, 5)[:, None]
    layer, K = layer_at(Z)
    m = np.array([0.5, -0.2, 0.1, 0.7, -0.4])
    expect = 0.5 * m @ np.linalg.solve(K, m)
    assert svgp_kl(layer.with_q(m, K)) == pytest.approx(expect, rel=1e-6)


def test_kl_matches_dense_oracle():
    rng = np.random.default_rng(5)
    Z = rng.uniform(-2, 2, (4, 2))
    layer, K = layer_at(Z, variance=1.3, ls=1.1, jitter=0.0)
    B = rng.normal(size=(4, 4))
    S = B @ B.T / 4 + 0.1 * np.eye(4)
    m = rng.normal(size=4)
    layer = layer.with_q(m, S)
    assert svgp_kl(layer) == pytest.approx(gauss_kl_dense(m.tolist(), S.tolist(), K.tolist()), abs=1e-10)


def test_non_pd_covariance_rejected():
    layer, _ = layer_at(np.zeros((2, 1)) + [[0.0], [1.0]])
    with pytest.raises(errors.NotPositiveDefinite):
        layer.with_q(np.zeros(2), -np.eye(2))


def test_input_dimension_checked():
    layer, _ = layer_at(np.linspace(0, 1, 3)[:, None])
    with pytest.raises(errors.DimensionMismatch):
        svgp_marginal(layer, np.zeros((4, 2)))


def test_inducing_choice_is_seeded_and_inside_data_range():
    X = np.random.default_rng(1).uniform(0, 1, (200, 2))
    a = choose_inducing(X, 10, seed=3)
    b = choose_inducing(X, 10, seed=3)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (10, 2)
    assert a.min() >= 0 and a.max() <= 1
