"""Exact Gaussian process regression with an ARD RBF kernel.

This module is deliberately plain numpy/scipy: it is both the reference the
sparse layers are tested against and a usable small-data regressor.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from .errors import DimensionMismatch, NotPositiveDefinite

logger = logging.getLogger(__name__)

JITTER_LADDER = (1e-8, 1e-6, 1e-4)


@dataclass(frozen=True)
class KernelSpec:
    """RBF kernel hyperparameters, stored in log space.

    ``variance`` is the signal variance and ``lengthscales`` the diagonal of
    the (ARD) distance metric, one entry per input dimension.
    """

    log_variance: float
    log_lengthscales: np.ndarray
    jitter: float = 1e-8

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.log_lengthscales, dtype=float))
        object.__setattr__(self, "log_lengthscales", ls)
        if not np.isfinite(self.log_variance) or not np.all(np.isfinite(ls)):
            raise ValueError("kernel hyperparameters must be finite")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")

    @classmethod
    def create(cls, variance=1.0, lengthscales=(1.0,), jitter=1e-8):
        lengthscales = np.atleast_1d(np.asarray(lengthscales, dtype=float))
        if variance <= 0 or np.any(lengthscales <= 0):
            raise ValueError("variance and lengthscales must be positive")
        return cls(float(np.log(variance)), np.log(lengthscales), jitter)

    @property
    def variance(self):
        return float(np.exp(self.log_variance))

    @property
    def lengthscales(self):
        return np.exp(self.log_lengthscales)

    @property
    def input_dim(self):
        return self.log_lengthscales.size


@dataclass(frozen=True)
class GaussianPrediction:
    mean: np.ndarray
    variance: np.ndarray
    covariance: np.ndarray = None

    @property
    def std(self):
        return np.sqrt(self.variance)


@dataclass(frozen=True)
class ExactGPModel:
    X: np.ndarray
    Y: np.ndarray
    kernel: KernelSpec
    noise_variance: float = field(default=0.1)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        if X.shape[0] == 1 and np.ndim(self.X) == 1:
            X = X.T
        Y = np.asarray(self.Y, dtype=float).ravel()
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        if X.shape[0] < 1:
            raise ValueError("need at least one training point")
        if X.shape[0] != Y.size:
            raise DimensionMismatch(f"X has {X.shape[0]} rows but Y has {Y.size} entries")
        if X.shape[1] != self.kernel.input_dim:
            raise DimensionMismatch(f"X has {X.shape[1]} columns, kernel expects {self.kernel.input_dim}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValueError("training data must be finite")
        if not self.noise_variance > 0:
            raise ValueError("noise variance must be positive")


def _as_2d(A, d):
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None] if d == 1 else A[None, :]
    if A.shape[1] != d:
        raise DimensionMismatch(f"inputs have {A.shape[1]} columns, kernel expects {d}")
    if not np.all(np.isfinite(A)):
        raise ValueError("inputs must be finite")
    return A


def kernel_eval(spec, A, B=None):
    """RBF covariance matrix between the rows of ``A`` and ``B``."""
    A = _as_2d(A, spec.input_dim)
    B = A if B is None else _as_2d(B, spec.input_dim)
    diff = (A[:, None, :] - B[None, :, :]) / spec.lengthscales
    return spec.variance * np.exp(-0.5 * np.sum(diff * diff, axis=-1))


def stable_cholesky(A, jitter=1e-8):
    """Cholesky of ``A``; on failure retry with diagonal jitter ``jitter``, then
    up the ladder.

    Returns ``(L, used_jitter)``.  Raises ``NotPositiveDefinite`` once the
    largest rung fails.
    """
    ladder = sorted({0.0, jitter, *[j for j in JITTER_LADDER if j >= jitter]})
    eye = np.eye(A.shape[0])
    for i, j in enumerate(ladder):
        try:
            L = np.linalg.cholesky(A + j * eye)
        except np.linalg.LinAlgError:
            continue
        if i > 0:
            logger.info("cholesky needed jitter %.0e", j)
        return L, j
    raise NotPositiveDefinite(f"matrix not positive definite after jitter {ladder[-1]:.0e}")


def _train_factor(model):
    K = kernel_eval(model.kernel, model.X)
    K[np.diag_indices_from(K)] += model.noise_variance
    L, _ = stable_cholesky(K, model.kernel.jitter)
    return L


def gp_predict(model, Xstar, full_cov=False):
    """Posterior of the latent function at ``Xstar`` (noise-free)."""
    Xstar = _as_2d(Xstar, model.kernel.input_dim)
    L = _train_factor(model)
    Ksx = kernel_eval(model.kernel, Xstar, model.X)
    alpha = cho_solve((L, True), model.Y)
    mean = Ksx @ alpha
    V = solve_triangular(L, Ksx.T, lower=True)
    if full_cov:
        cov = kernel_eval(model.kernel, Xstar) - V.T @ V
        var = np.diag(cov).copy()
    else:
        cov = None
        var = model.kernel.variance - np.sum(V * V, axis=0)
    if np.any(var < 0):
        logger.debug("clamped %d negative posterior variances", int(np.sum(var < 0)))
        var = np.maximum(var, 0.0)
    return GaussianPrediction(mean, var, cov)


def gp_log_marginal_likelihood(model):
    """log N(Y | 0, K + noise * I)."""
    L = _train_factor(model)
    alpha = cho_solve((L, True), model.Y)
    n = model.Y.size
    return float(-0.5 * model.Y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * np.log(2 * np.pi))


def gp_lml_gradient(model):
    """Gradient of the log marginal likelihood.

    Ordered as (log variance, log lengthscales..., log noise variance).
    """
    X = model.X
    K = kernel_eval(model.kernel, X)
    Ky = K.copy()
    Ky[np.diag_indices_from(Ky)] += model.noise_variance
    L, _ = stable_cholesky(Ky, model.kernel.jitter)
    alpha = cho_solve((L, True), model.Y)
    W = np.outer(alpha, alpha) - cho_solve((L, True), np.eye(len(alpha)))

    grads = [0.5 * np.sum(W * K)]
    for d, ell in enumerate(model.kernel.lengthscales):
        sq = (X[:, None, d] - X[None, :, d]) ** 2 / ell**2
        grads.append(0.5 * np.sum(W * K * sq))
    grads.append(0.5 * model.noise_variance * np.trace(W))
    return np.array(grads)


def fit_exact_gp(X, Y, kernel=None, noise_variance=0.1, maxiter=200):
    """Maximise the marginal likelihood over log hyperparameters with L-BFGS."""
    X = np.asarray(X, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    kernel = kernel or KernelSpec.create(1.0, np.ones(X.shape[1]))
    theta0 = np.r_[kernel.log_variance, kernel.log_lengthscales, np.log(noise_variance)]

    def unpack(theta):
        k = KernelSpec(theta[0], theta[1:-1], kernel.jitter)
        return ExactGPModel(X, Y, k, float(np.exp(theta[-1])))

    def objective(theta):
        m = unpack(theta)
        return -gp_log_marginal_likelihood(m), -gp_lml_gradient(m)

    res = minimize(objective, theta0, jac=True, method="L-BFGS-B",
                   bounds=[(-10, 10)] * len(theta0), options={"maxiter": maxiter})
    return unpack(res.x)


def time_features(index, steps_per_day, origin=0.0, span=1.0):
    """Regression inputs for a load series.

    Columns: time index rescaled as ``(index - origin) / span``, then the sine
    and cosine of the daily phase.
    """
    index = np.asarray(index, dtype=float)
    phase = 2.0 * np.pi * index / steps_per_day
    return np.column_stack([(index - origin) / span, np.sin(phase), np.cos(phase)])
