"""Sparse variational GP layer (unwhitened inducing-point parameterisation).

The differentiable pieces (``rbf``, ``conditional``, ``kl_divergence``)
operate on dictionaries of :class:`~cfdgp.autodiff.Var` so the deep model can
train through them; ``svgp_marginal`` and ``svgp_kl`` are the plain-array
entry points.
"""

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.cluster.vq import kmeans2

from . import autodiff as ad
from .errors import DimensionMismatch, NotPositiveDefinite
from .gpcore import JITTER_LADDER, GaussianPrediction, KernelSpec

logger = logging.getLogger(__name__)

MEAN_FUNCTIONS = ("zero", "identity")
PARAM_NAMES = ("log_variance", "log_lengthscales", "Z", "q_mu", "q_sqrt_lower", "q_log_diag")


@dataclass
class SVGPLayer:
    """One sparse GP layer with ``output_dim`` independent outputs.

    Outputs share the kernel and the inducing inputs ``Z`` (M x d); each has
    its own variational mean column in ``q_mu`` (M x O) and covariance factor
    ``L_o`` built from the strictly-lower part of ``q_sqrt_lower[o]`` and the
    exponentiated ``q_log_diag[o]``, so ``S_o = L_o L_o^T`` is always PD.
    """

    kernel: KernelSpec
    Z: np.ndarray
    q_mu: np.ndarray
    q_sqrt_lower: np.ndarray
    q_log_diag: np.ndarray
    mean_function: str = "zero"
    skip_weights: np.ndarray = field(default=None)

    def __post_init__(self):
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        M, d = self.Z.shape
        self.q_mu = np.asarray(self.q_mu, dtype=float).reshape(M, -1)
        O = self.q_mu.shape[1]
        self.q_sqrt_lower = np.asarray(self.q_sqrt_lower, dtype=float).reshape(O, M, M)
        self.q_log_diag = np.asarray(self.q_log_diag, dtype=float).reshape(O, M)
        if d != self.kernel.input_dim:
            raise DimensionMismatch(f"Z has {d} columns, kernel expects {self.kernel.input_dim}")
        if self.mean_function not in MEAN_FUNCTIONS:
            raise ValueError(f"unknown mean function {self.mean_function!r}")
        if self.mean_function == "identity" and self.skip_weights is None:
            if d != O:
                raise DimensionMismatch("identity mean needs input_dim == output_dim or explicit skip_weights")
            self.skip_weights = np.eye(d)

    @property
    def num_inducing(self):
        return self.Z.shape[0]

    @property
    def input_dim(self):
        return self.Z.shape[1]

    @property
    def output_dim(self):
        return self.q_mu.shape[1]

    @property
    def q_sqrt(self):
        M = self.num_inducing
        return np.tril(self.q_sqrt_lower, -1) + np.exp(self.q_log_diag)[:, :, None] * np.eye(M)

    @property
    def q_cov(self):
        L = self.q_sqrt
        return L @ np.swapaxes(L, -1, -2)

    def params(self):
        return {
            "log_variance": np.array(self.kernel.log_variance),
            "log_lengthscales": self.kernel.log_lengthscales.copy(),
            "Z": self.Z.copy(),
            "q_mu": self.q_mu.copy(),
            "q_sqrt_lower": np.tril(self.q_sqrt_lower, -1),
            "q_log_diag": self.q_log_diag.copy(),
        }

    def with_params(self, p):
        kernel = KernelSpec(float(p["log_variance"]), np.asarray(p["log_lengthscales"]), self.kernel.jitter)
        return replace(
            self,
            kernel=kernel,
            Z=np.asarray(p["Z"]).copy(),
            q_mu=np.asarray(p["q_mu"]).copy(),
            q_sqrt_lower=np.tril(p["q_sqrt_lower"], -1),
            q_log_diag=np.asarray(p["q_log_diag"]).copy(),
        )

    def with_q(self, mean, cov):
        """Copy with q(u) set to N(mean, cov); cov may be (M, M) or (O, M, M)."""
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 2:
            cov = cov[None]
        try:
            L = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite("variational covariance must be positive definite") from exc
        diag = np.diagonal(L, axis1=-2, axis2=-1)
        return replace(
            self,
            q_mu=np.asarray(mean, dtype=float).reshape(self.num_inducing, -1).copy(),
            q_sqrt_lower=np.tril(L, -1),
            q_log_diag=np.log(diag),
        )


def init_layer(X, num_inducing=64, output_dim=1, mean_function="zero", variance=1.0,
               lengthscales=None, q_var=1e-5, jitter=1e-6, seed=0, Z=None, skip_weights=None):
    """Layer with k-means inducing inputs, m = 0 and S = q_var * I."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if Z is None:
        Z = choose_inducing(X, num_inducing, seed)
    M, d = Z.shape
    if lengthscales is None:
        lengthscales = np.ones(d)
    kernel = KernelSpec.create(variance, np.broadcast_to(lengthscales, (d,)), jitter)
    return SVGPLayer(
        kernel=kernel,
        Z=Z,
        q_mu=np.zeros((M, output_dim)),
        q_sqrt_lower=np.zeros((output_dim, M, M)),
        q_log_diag=np.full((output_dim, M), 0.5 * np.log(q_var)),
        mean_function=mean_function,
        skip_weights=skip_weights,
    )


def choose_inducing(X, num_inducing, seed=0, lengthscales=None):
    """Deterministic k-means centres of the training inputs (all of X if n <= M).

    Clustering runs in the kernel metric: inputs are divided by
    ``lengthscales`` first, so short-lengthscale dimensions get finer cover.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if num_inducing < 1:
        raise ValueError("need at least one inducing point")
    if X.shape[0] <= num_inducing:
        return X.copy()
    scale = np.ones(X.shape[1]) if lengthscales is None else np.broadcast_to(lengthscales, (X.shape[1],))
    Xs = X / scale
    rng = np.random.default_rng(seed)
    start = Xs[np.sort(rng.choice(X.shape[0], num_inducing, replace=False))]
    with warnings.catch_warnings():
        # an emptied cluster keeps its start point, which is all we need
        warnings.simplefilter("ignore", UserWarning)
        centres, _ = kmeans2(Xs, start, iter=20, minit="matrix", seed=rng)
    return centres * scale


# -- differentiable internals -------------------------------------------------

def as_vars(params, trainable=None):
    """Wrap a parameter dict; names in ``trainable`` (default all) get gradients."""
    out = {}
    for name, value in params.items():
        if trainable is None or name in trainable:
            out[name] = ad.variable(value)
        else:
            out[name] = ad.constant(value)
    return out


def rbf(p, A, B):
    """RBF covariance between rows of ``A`` (..., n, d) and ``B`` (m, d).

    Fused into one tape node; the backward pass is written with matmuls.
    """
    A, B = ad.constant(A), ad.constant(B)
    logvar, logls = p["log_variance"], p["log_lengthscales"]
    inv2 = np.exp(-2.0 * logls.value)
    a, b = A.value, B.value
    if a.ndim > 2:
        # batched inner-layer inputs: expanded form keeps tensors 3-D
        d2 = (a * a) @ inv2[:, None] + (b * b) @ inv2 - 2.0 * (a * inv2) @ b.T
        np.maximum(d2, 0.0, out=d2)
    else:
        # explicit differences keep full precision for ill-conditioned K_ZZ
        diff = a[:, None, :] - b[None, :, :]
        d2 = (diff * diff) @ inv2
    K = np.exp(logvar.value) * np.exp(-0.5 * d2)

    memo = {}

    def g_d2(g):
        if memo.get("g") is not g:
            memo["g"] = g
            memo["h"] = g * K
        return -0.5 * memo["h"]

    def vjp_a(g):
        G = g_d2(g)
        return 2.0 * inv2 * (a * G.sum(axis=-1, keepdims=True) - G @ b)

    def vjp_b(g):
        G = g_d2(g)
        Ga = np.swapaxes(G, -1, -2) @ a
        col = G.sum(axis=-2)
        if a.ndim > 2:
            Ga = Ga.reshape(-1, *Ga.shape[-2:]).sum(axis=0)
            col = col.reshape(-1, col.shape[-1]).sum(axis=0)
        return -2.0 * inv2 * (Ga - b * col[:, None])

    def vjp_logls(g):
        G = g_d2(g)
        d = a.shape[-1]
        a2 = a.reshape(-1, d)
        row = G.sum(axis=-1).reshape(-1)
        col = G.reshape(-1, G.shape[-1]).sum(axis=0)
        GB = (G @ b).reshape(-1, d)
        t = row @ (a2 * a2) - 2.0 * np.sum(a2 * GB, axis=0) + col @ (b * b)
        return -2.0 * inv2 * t

    def vjp_logvar(g):
        g_d2(g)
        return np.sum(memo["h"])

    return ad.custom(K, (A, vjp_a), (B, vjp_b), (logls, vjp_logls), (logvar, vjp_logvar))


def kzz_factor(p, jitter):
    """Cholesky of K_ZZ, walking the jitter ladder on failure."""
    Kzz = rbf(p, p["Z"], p["Z"])
    rungs = sorted({jitter, *[j for j in JITTER_LADDER if j > jitter]})
    for i, j in enumerate(rungs):
        try:
            L = ad.cholesky(Kzz, j)
        except np.linalg.LinAlgError:
            continue
        if i > 0:
            logger.debug("K_ZZ needed jitter %.0e", j)
        return L
    raise NotPositiveDefinite(f"K_ZZ not positive definite after jitter {rungs[-1]:.0e}")


def _q_sqrt(p):
    M = p["q_log_diag"].shape[-1]
    mask = np.tril(np.ones((M, M)), -1)
    return p["q_sqrt_lower"] * mask + ad.exp(p["q_log_diag"]).reshape(p["q_log_diag"].shape + (1,)) * np.eye(M)


def prepare(p, jitter=1e-6):
    """Per-layer quantities shared by the marginal and the KL term.

    ``Lz`` is chol(K_ZZ); ``w_sqrt = Lz^-1 L_q`` and ``w_mu = Lz^-1 m``.
    """
    Lz = kzz_factor(p, jitter)
    return {
        "Lz": Lz,
        "w_sqrt": ad.solve_tri(Lz, _q_sqrt(p)),
        "w_mu": ad.solve_tri(Lz, p["q_mu"]),
    }


def conditional(p, X, mean_function="zero", skip_weights=None, jitter=1e-6, full_cov=False, prep=None):
    """Marginals of q(f) at inputs ``X`` (shape (..., n, d)).

    Returns ``(mean, var)`` of shape (..., n, O).  With ``full_cov`` (2-D
    ``X`` only) the second value is the (O, n, n) covariance.

    With A = Lz^-1 K_ZX the mean is A^T w_mu and the covariance
    K_XX - A^T A + A^T w_sqrt w_sqrt^T A, which equals
    K_XX - K_XZ K_ZZ^-1 (K_ZZ - S) K_ZZ^-1 K_ZX.
    """
    X = ad.constant(X)
    prep = prep or prepare(p, jitter)
    Kzx = rbf(p, X, p["Z"]).mT
    A = ad.solve_tri(prep["Lz"], Kzx)
    mean = A.mT @ prep["w_mu"]
    W = prep["w_sqrt"]
    if full_cov:
        if X.ndim != 2:
            raise DimensionMismatch("full covariance needs 2-D inputs")
        C = W.mT @ A
        var = rbf(p, X, X) - A.mT @ A + C.mT @ C
    else:
        C = W.mT @ A.reshape(A.shape[:-2] + (1,) + A.shape[-2:])
        var = ad.sum(ad.square(C), axis=-2).mT - ad.sum(ad.square(A), axis=-2).reshape(A.shape[:-2] + (A.shape[-1], 1))
        var = ad.clip_min(var + ad.exp(p["log_variance"]), 0.0)
    if mean_function == "identity":
        mean = mean + X @ skip_weights
    return mean, var


def kl_divergence(p, jitter=1e-6, prep=None):
    """Sum over outputs of KL(N(m_o, S_o) || N(0, K_ZZ))."""
    prep = prep or prepare(p, jitter)
    M = prep["Lz"].shape[0]
    O = p["q_mu"].shape[1]
    trace = ad.sum(ad.square(prep["w_sqrt"]))
    maha = ad.sum(ad.square(prep["w_mu"]))
    logdet_k = 2.0 * ad.sum(ad.log(ad.diag_part(prep["Lz"])))
    logdet_s = 2.0 * ad.sum(p["q_log_diag"])
    return 0.5 * (trace + maha - M * O + O * logdet_k - logdet_s)


# -- public array API ----------------------------------------------------------

def svgp_marginal(layer, X, full_cov=False):
    """q(f) at ``X`` for a single layer, as a :class:`GaussianPrediction`.

    For a one-output layer the mean and variance are flat n-vectors.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None] if layer.input_dim == 1 else X[None, :]
    if X.shape[-1] != layer.input_dim:
        raise DimensionMismatch(f"inputs have {X.shape[-1]} columns, layer expects {layer.input_dim}")
    p = as_vars(layer.params(), trainable=())
    mean, var = conditional(p, X, layer.mean_function, layer.skip_weights, layer.kernel.jitter, full_cov)
    mean = mean.value
    if full_cov:
        cov = var.value
        variance = np.maximum(np.diagonal(cov, axis1=-2, axis2=-1).T, 0.0)
    else:
        cov = None
        variance = var.value
    if layer.output_dim == 1:
        mean = mean[..., 0]
        variance = variance[..., 0]
        cov = None if cov is None else cov[0]
    return GaussianPrediction(mean, variance, cov)


def svgp_kl(layer):
    p = as_vars(layer.params(), trainable=())
    return float(kl_divergence(p, layer.kernel.jitter).value)
