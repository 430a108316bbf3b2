"""Fixtures shared by unit and acceptance tests."""

import numpy as np

from cfdgp.dgp import DGPModel, dgp_elbo, draw_eps, elbo_and_grad, init_dgp
from cfdgp.gpcore import ExactGPModel, KernelSpec, kernel_eval
from cfdgp.svgp import init_layer


def exact_posterior_layer(X, Y, noise, variance=1.0, lengthscale=1.0, jitter=1e-10):
    """Single SVGP layer with Z = X and q(u) set to the exact GP posterior."""
    X = np.asarray(X, dtype=float)
    layer = init_layer(X, X.shape[0], Z=X, variance=variance, lengthscales=[lengthscale] * X.shape[1],
                       jitter=jitter)
    K = kernel_eval(layer.kernel, X)
    A = np.linalg.solve(K + noise * np.eye(len(X)), K)
    layer = layer.with_q(A.T @ Y, K - K @ A)
    exact = ExactGPModel(X, Y, KernelSpec(np.log(variance), [np.log(lengthscale)] * X.shape[1]), noise)
    return layer, exact, DGPModel([layer], float(np.log(noise)))


def unit_grid_draw(n=20, noise=0.1, seed=0):
    """A draw from a unit-lengthscale GP on X = 0..n-1, plus observation noise."""
    rng = np.random.default_rng(seed)
    X = np.arange(float(n))[:, None]
    K = kernel_eval(KernelSpec.create(1.0, [1.0]), X)
    f = np.linalg.cholesky(K + 1e-10 * np.eye(n)) @ rng.standard_normal(n)
    return X, f + np.sqrt(noise) * rng.standard_normal(n)


def perturbed_dgp(n=10, d=1, num_inducing=4, num_layers=2, seed=0):
    """Small deep GP moved away from its initial state so no gradient is trivially zero."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2, 2, (n, d))
    Y = np.sin(2 * X[:, 0]) + (X[:, 1] if d > 1 else 0.0)
    model = init_dgp(X, num_layers=num_layers, num_inducing=num_inducing, seed=seed)
    params = {}
    for k, v in model.params().items():
        v = np.asarray(v + 0.1 * rng.standard_normal(np.shape(v)))
        params[k] = np.tril(v, -1) if k.endswith("q_sqrt_lower") else v
    return model.with_params(params), X, Y, rng


def finite_difference_errors(model, X, Y, eps, h=1e-5):
    """Relative error per parameter block between tape gradients and central differences."""
    _, grads = elbo_and_grad(model, X, Y, eps)
    params = model.params()
    out = {}
    for name, value in params.items():
        value = np.asarray(value, dtype=float)
        fd = np.zeros_like(value)
        for i in np.ndindex(value.shape):
            if name.endswith("q_sqrt_lower") and i[-1] >= i[-2]:
                continue
            shifted = []
            for sign in (1.0, -1.0):
                p = {k: np.array(v, dtype=float, copy=True) for k, v in params.items()}
                p[name][i] += sign * h
                shifted.append(dgp_elbo(model.with_params(p), X, Y, eps=eps))
            fd[i] = (shifted[0] - shifted[1]) / (2 * h)
        g = np.asarray(grads[name])
        out[name] = float(np.linalg.norm(fd - g) / max(np.linalg.norm(fd), 1e-12))
    return out


def frozen_eps(model, n, seed=0, mc_samples=1):
    return draw_eps(model, mc_samples, n, np.random.default_rng(seed))
