"""Deep GP: stacked sparse layers trained by doubly stochastic variational inference.

The inner layers are sampled with the reparameterisation
``f_l = mu_l(f_{l-1}) + eps * sqrt(var_l(f_{l-1}))``; the Gaussian likelihood
expectation at the last layer is taken in closed form for each inner sample.
"""

import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionMismatch, Diverged, NonFinite, UntrainedModel
from .gpcore import GaussianPrediction, time_features
from .svgp import as_vars, choose_inducing, conditional, init_layer, kl_divergence, prepare

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    iterations: int = 2000
    minibatch_size: int = 256
    mc_samples: int = 5
    seed: int = 0
    window: int = 100
    tolerance: float = 0.0
    divergence_factor: float = 10.0
    freeze_inducing: bool = False

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        for name in ("iterations", "minibatch_size", "mc_samples", "window"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.tolerance < 0 or self.divergence_factor <= 0:
            raise ConfigError("tolerance must be >= 0 and divergence_factor > 0")


@dataclass
class DGPModel:
    """Stack of SVGP layers with a homoscedastic Gaussian likelihood.

    ``y_mean``/``y_std`` map the standardised training scale back to data
    units; everything inside the ELBO lives on the standardised scale.
    """

    layers: list
    log_noise: float = float(np.log(0.1))
    y_mean: float = 0.0
    y_std: float = 1.0
    trained: bool = False

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a deep GP needs at least one layer")
        for upper, lower in zip(self.layers[1:], self.layers[:-1]):
            if upper.input_dim != lower.output_dim:
                raise DimensionMismatch("adjacent layer dimensions do not chain")
        if self.y_std <= 0:
            raise ValueError("y_std must be positive")

    @property
    def num_layers(self):
        return len(self.layers)

    @property
    def input_dim(self):
        return self.layers[0].input_dim

    @property
    def noise_variance(self):
        return float(np.exp(self.log_noise))

    def params(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, value in layer.params().items():
                out[f"{i}.{name}"] = value
        out["log_noise"] = np.array(self.log_noise)
        return out

    def with_params(self, params, **changes):
        layers = []
        for i, layer in enumerate(self.layers):
            prefix = f"{i}."
            sub = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
            layers.append(layer.with_params(sub))
        return replace(self, layers=layers, log_noise=float(params["log_noise"]), **changes)


def init_dgp(X, num_layers=2, num_inducing=64, hidden_dim=None, noise_variance=0.1,
             lengthscales=None, q_var=1e-5, jitter=1e-6, seed=0):
    """Deep GP initialised as in doubly stochastic VI practice.

    Inner layers carry an identity skip mean (a fixed PCA projection when the
    hidden width differs from the input width), inducing inputs are k-means
    centres propagated through those skips, and every q(u) starts at
    N(0, q_var * I).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if num_layers < 1:
        raise ConfigError("num_layers must be >= 1")
    d = X.shape[1]
    hidden_dim = hidden_dim or d
    Z = choose_inducing(X, num_inducing, seed, lengthscales)
    H = X
    layers = []
    d_in = d
    for i in range(num_layers):
        last = i == num_layers - 1
        d_out = 1 if last else hidden_dim
        skip = None if last or d_in == d_out else _pca_projection(H, d_out)
        layer = init_layer(H, output_dim=d_out, mean_function="zero" if last else "identity",
                           lengthscales=lengthscales if i == 0 else None,
                           q_var=q_var, jitter=jitter, Z=Z, skip_weights=skip)
        layers.append(layer)
        if not last:
            H = H @ layer.skip_weights
            Z = Z @ layer.skip_weights
            d_in = d_out
    return DGPModel(layers, float(np.log(noise_variance)))


def _pca_projection(X, k):
    Xc = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    W = vt[:k].T
    if W.shape[1] < k:
        W = np.pad(W, ((0, 0), (0, k - W.shape[1])))
    return W


def _split(model, pv):
    per_layer = [{} for _ in model.layers]
    for key, var in pv.items():
        if key == "log_noise":
            continue
        i, name = key.split(".", 1)
        per_layer[int(i)][name] = var
    return per_layer


def _factors(model, per_layer):
    return [prepare(p, layer.kernel.jitter) for p, layer in zip(per_layer, model.layers)]


def _propagate(model, per_layer, X, eps, analytic_last, factors=None):
    """Run the stack; returns (samples per layer, last mean, last var)."""
    factors = factors or _factors(model, per_layer)
    F = ad.constant(X)
    samples = []
    mean = var = None
    for i, (layer, p) in enumerate(zip(model.layers, per_layer)):
        mean, var = conditional(p, F, layer.mean_function, layer.skip_weights, layer.kernel.jitter,
                                prep=factors[i])
        if analytic_last and i == model.num_layers - 1:
            break
        F = mean + eps[i] * ad.sqrt(var)
        samples.append(F)
    return samples, mean, var


def draw_eps(model, num_samples, n, rng, include_last=False):
    layers = model.layers if include_last else model.layers[:-1]
    return [rng.standard_normal((num_samples, n, layer.output_dim)) for layer in layers]


def _elbo(model, pv, X, y, eps, num_data):
    per_layer = _split(model, pv)
    factors = _factors(model, per_layer)
    _, mean, var = _propagate(model, per_layer, X, eps, analytic_last=True, factors=factors)
    noise = ad.exp(pv["log_noise"])
    resid = ad.square(y[None, :, None] - mean) + var
    ell = -0.5 * LOG_2PI - 0.5 * pv["log_noise"] - 0.5 * resid / noise
    scale = num_data / X.shape[0]
    expected = ad.sum(ad.mean(ell, axis=0)) * scale
    kl = sum(kl_divergence(p, prep=prep) for p, prep in zip(per_layer, factors))
    return expected - kl


def _standardise(model, Y):
    return (np.asarray(Y, dtype=float).ravel() - model.y_mean) / model.y_std


def dgp_sample_forward(model, X, rng, num_samples=1):
    """Sampled outputs of every layer, each of shape (num_samples, n, O_l)."""
    X = _inputs(model, X)
    eps = draw_eps(model, num_samples, X.shape[0], rng, include_last=True)
    per_layer = _split(model, as_vars(model.params(), trainable=()))
    samples, _, _ = _propagate(model, per_layer, X, eps, analytic_last=False)
    return [s.value for s in samples]


def dgp_elbo(model, X, Y, mc_samples=5, rng=None, num_data=None, eps=None):
    """Monte Carlo ELBO estimate on the standardised target scale.

    When ``X`` is a minibatch, pass the full data size as ``num_data`` so the
    likelihood term is rescaled by ``num_data / len(X)``.
    """
    X = _inputs(model, X)
    y = _standardise(model, Y)
    if y.size != X.shape[0]:
        raise DimensionMismatch("X and Y lengths differ")
    if eps is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        eps = draw_eps(model, mc_samples, X.shape[0], rng)
    pv = as_vars(model.params(), trainable=())
    value = float(_elbo(model, pv, X, y, eps, num_data or X.shape[0]).value)
    if not np.isfinite(value):
        raise NonFinite(f"ELBO evaluated to {value}")
    return value


def elbo_and_grad(model, X, Y, eps, num_data=None, trainable=None):
    """ELBO value and gradient dict for fixed noise draws ``eps``."""
    X = _inputs(model, X)
    y = _standardise(model, Y)
    params = model.params()
    names = [k for k in params if trainable is None or k in trainable]
    pv = as_vars(params, trainable=names)
    out = _elbo(model, pv, X, y, eps, num_data or X.shape[0])
    grads = ad.grad(out, [pv[k] for k in names])
    return float(out.value), dict(zip(names, grads))


def _inputs(model, X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != model.input_dim:
        raise DimensionMismatch(f"inputs have {X.shape[1]} columns, model expects {model.input_dim}")
    return X


@dataclass
class TrainingTrace:
    iteration: list = field(default_factory=list)
    elbo: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)

    def smoothed(self, window=50):
        e = np.asarray(self.elbo)
        if e.size < window:
            return e.copy()
        return np.convolve(e, np.ones(window) / window, mode="valid")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "elbo", "wall_ms"])
            for row in zip(self.iteration, self.elbo, self.wall_ms):
                w.writerow([row[0], repr(row[1]), f"{row[2]:.3f}"])


def dgp_train(model, X, Y, config=None):
    """Adam ascent on the doubly stochastic ELBO.

    Targets are standardised first; the returned model records the constants.
    Deterministic given ``config.seed``.
    """
    config = config or TrainConfig()
    X = _inputs(model, X)
    Y = np.asarray(Y, dtype=float).ravel()
    n = X.shape[0]
    if Y.size != n:
        raise DimensionMismatch("X and Y lengths differ")
    std = float(Y.std())
    model = replace(model, y_mean=float(Y.mean()), y_std=std if std > 0 else 1.0)
    y = _standardise(model, Y)
    batch = min(config.minibatch_size, n)

    params = model.params()
    frozen = {k for k in params if k.endswith(".Z")} if config.freeze_inducing else set()
    names = [k for k in params if k not in frozen]
    rng = np.random.default_rng(config.seed)
    opt = ad.Adam(config.learning_rate)
    trace = TrainingTrace()
    start = time.perf_counter()
    w = config.window

    for it in range(config.iterations):
        idx = rng.choice(n, batch, replace=False) if batch < n else np.arange(n)
        eps = draw_eps(model, config.mc_samples, batch, rng)
        pv = as_vars(params, trainable=names)
        try:
            out = _elbo(model, pv, X[idx], y[idx], eps, n)
        except np.linalg.LinAlgError as exc:
            raise NonFinite(f"iteration {it}: factorisation failed ({exc})") from exc
        value = float(out.value)
        if not np.isfinite(value):
            raise NonFinite(f"iteration {it}: ELBO is {value}")
        grads = ad.grad(out, [pv[k] for k in names])
        for k, g in zip(names, grads):
            if not np.all(np.isfinite(g)):
                raise NonFinite(f"iteration {it}: non-finite gradient in {k}")
        opt.step(params, {k: -g for k, g in zip(names, grads)})

        trace.iteration.append(it)
        trace.elbo.append(value)
        trace.wall_ms.append(1000.0 * (time.perf_counter() - start))

        if it + 1 >= 2 * w and (it + 1) % w == 0:
            e = np.asarray(trace.elbo)
            first = e[:w].mean()
            recent = e[-w:].mean()
            previous = e[-2 * w:-w].mean()
            if recent < first - config.divergence_factor * abs(first):
                raise Diverged(f"iteration {it}: smoothed ELBO {recent:.4g} fell below initial {first:.4g}")
            if config.tolerance > 0 and abs(recent - previous) <= config.tolerance * abs(previous):
                logger.info("converged at iteration %d", it)
                break

    return model.with_params(params, trained=True), trace


def _split_seeds(seed, num_samples):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(num_samples)]


def dgp_predict(model, Xstar, num_samples=200, seed=0, include_noise=True, chunk=256):
    """Predictive mean and variance in data units.

    Each draw has its own random stream split from ``seed``; the inner layers
    are sampled and the last layer's Gaussian moments are mixed across draws.
    """
    Xstar = _inputs(model, Xstar)
    n = Xstar.shape[0]
    streams = _split_seeds(seed, num_samples)
    inner = model.layers[:-1]
    eps = [np.stack([r.standard_normal((n, layer.output_dim)) for r in streams]) for layer in inner]
    # draws must not depend on chunking: every stream is consumed layer by layer above
    per_layer = _split(model, as_vars(model.params(), trainable=()))
    means = np.empty((num_samples, n))
    variances = np.empty((num_samples, n))
    step = chunk if inner else max(chunk, n)
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        _, m, v = _propagate(model, per_layer, Xstar[lo:hi], [e[:, lo:hi] for e in eps], analytic_last=True)
        means[:, lo:hi] = np.broadcast_to(m.value[..., 0], (num_samples, hi - lo))
        variances[:, lo:hi] = np.broadcast_to(v.value[..., 0], (num_samples, hi - lo))
    mean = means.mean(axis=0)
    var = (variances + means**2).mean(axis=0) - mean**2
    var = np.maximum(var, 0.0)
    if include_noise:
        var = var + model.noise_variance
    return GaussianPrediction(model.y_mean + model.y_std * mean, model.y_std**2 * var)


@dataclass
class LoadModel:
    """A deep GP regressor over time features of one load series.

    With ``lags > 0`` the previous ``lags`` observed values are appended to the
    inputs, read from ``context`` (the observed series, starting at
    ``context_start``).  A lag that is unobserved falls back to ``lag_mean``.
    ``trend=False`` drops the time-index column, leaving only the daily phase.
    """

    model: DGPModel
    steps_per_day: int
    origin: float
    span: float
    lags: int = 0
    lag_mean: float = 0.0
    lag_std: float = 1.0
    context: np.ndarray = None
    context_start: int = 0
    trend: bool = True

    def with_context(self, values, start_index=0):
        return replace(self, context=np.asarray(values, dtype=float), context_start=int(start_index))

    def _lagged(self, index, lag):
        out = np.full(index.shape, self.lag_mean)
        if self.context is not None:
            pos = index.astype(int) - lag - self.context_start
            ok = (pos >= 0) & (pos < self.context.size)
            out[ok] = self.context[pos[ok]]
            out[np.isnan(out)] = self.lag_mean
        return (out - self.lag_mean) / self.lag_std

    def features(self, index):
        index = np.asarray(index, dtype=float)
        X = time_features(index, self.steps_per_day, self.origin, self.span)
        if not self.trend:
            X = X[:, 1:]
        if not self.lags:
            return X
        return np.column_stack([X] + [self._lagged(index, l) for l in range(1, self.lags + 1)])

    def predict(self, index, num_samples=200, seed=0):
        if not self.model.trained:
            raise UntrainedModel("load model has not been trained")
        return dgp_predict(self.model, self.features(index), num_samples=num_samples, seed=seed)


def fit_load_model(values, index, steps_per_day, num_layers=2, num_inducing=64,
                   config=None, hidden_dim=None, noise_variance=0.1, lags=0, lengthscales=None,
                   trend=True):
    """Train a deep GP on one series; NaN targets are skipped.

    ``index`` must be contiguous.  Default initial lengthscales are 1.0 for
    the time index and lag columns and 0.3 for the phase columns.
    """
    config = config or TrainConfig()
    values = np.asarray(values, dtype=float)
    index = np.asarray(index, dtype=float)
    keep = np.isfinite(values)
    if keep.sum() < 2:
        raise ValueError("need at least two observed values to fit a load model")
    origin = float(index[keep].min())
    span = float(max(index[keep].max() - origin, 1.0))
    lm = LoadModel(None, steps_per_day, origin, span, lags,
                   float(values[keep].mean()), float(values[keep].std() or 1.0), trend=trend)
    lm = lm.with_context(values, int(index[0]))
    X = lm.features(index[keep])
    if lengthscales is None:
        lengthscales = [1.0] * trend + [0.3, 0.3] + [1.0] * lags
    model = init_dgp(X, num_layers=num_layers, num_inducing=num_inducing, hidden_dim=hidden_dim,
                     noise_variance=noise_variance, lengthscales=lengthscales, seed=config.seed)
    trained, trace = dgp_train(model, X, values[keep], config)
    return replace(lm, model=trained), trace
