"""Metrics, the chronological train/validate/test harness and comparison tables."""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .cf import (
    METHODS,
    baseline_average,
    baseline_prediction_based,
    cf_dgp_estimate,
    cf_estimate,
    correlation_matrix,
    historical_means,
    node_seed,
    select_neighbors,
)
from .data import SyntheticSpec
from .dgp import TrainConfig, fit_load_model
from .errors import ConfigError, DataError, Empty, EmptyAfterExclusion, LengthMismatch

logger = logging.getLogger(__name__)


def _pair(estimates, truth):
    a = np.asarray(estimates, dtype=float).ravel()
    b = np.asarray(truth, dtype=float).ravel()
    if a.size != b.size:
        raise LengthMismatch(f"{a.size} estimates vs {b.size} truth values")
    if a.size == 0:
        raise Empty("no points to score")
    return a, b


def mape(estimates, truth, epsilon=1e-3, return_excluded=False):
    """Mean absolute percentage error (%) over points with |truth| >= epsilon."""
    if epsilon < 0:
        raise ConfigError("epsilon must be >= 0")
    a, b = _pair(estimates, truth)
    keep = np.abs(b) >= epsilon
    if epsilon == 0:
        keep &= b != 0
    excluded = int(b.size - keep.sum())
    if not keep.any():
        raise EmptyAfterExclusion(f"all {b.size} points have |truth| < {epsilon}")
    value = float(100.0 * np.mean(np.abs(a[keep] - b[keep]) / np.abs(b[keep])))
    return (value, excluded) if return_excluded else value


def rmse(estimates, truth):
    a, b = _pair(estimates, truth)
    return float(np.sqrt(np.mean((a - b) ** 2)))


@dataclass(frozen=True)
class MetricReport:
    """Scores of one method; ``missing`` counts points without a truth value."""

    method: str
    rmse: float
    mape: float
    n_points: int
    excluded: int
    missing: int = 0
    per_window: tuple = ()


def score(method, estimates, truth, window_index=None, epsilon=1e-3):
    a, b = _pair(estimates, truth)
    seen = np.isfinite(b)
    if not seen.any():
        raise Empty("truth has no observed values")
    m, excluded = mape(a[seen], b[seen], epsilon, return_excluded=True)
    rows = []
    if window_index is not None:
        w = np.asarray(window_index)[seen]
        for k in np.unique(w):
            sel = w == k
            try:
                wm = mape(a[seen][sel], b[seen][sel], epsilon)
            except EmptyAfterExclusion:
                wm = float("nan")
            rows.append((int(k), rmse(a[seen][sel], b[seen][sel]), wm))
    return MetricReport(method, rmse(a[seen], b[seen]), m, int(seen.sum()), excluded,
                        int((~seen).sum()), tuple(rows))


# -- harness ---------------------------------------------------------------------

@dataclass(frozen=True)
class SplitConfig:
    train: float = 0.60
    validate: float = 0.15
    test: float = 0.25

    def __post_init__(self):
        parts = (self.train, self.validate, self.test)
        if min(parts) < 0 or self.train <= 0 or self.test <= 0 or abs(sum(parts) - 1.0) > 1e-9:
            raise ConfigError("split fractions must be non-negative, with train and test > 0, summing to 1")

    def windows(self, start, stop):
        """Chronological slow-index blocks ``{"train", "validate", "test"}``."""
        n = stop - start
        a = start + int(round(self.train * n))
        b = start + int(round((self.train + self.validate) * n))
        if a <= start or b >= stop:
            raise DataError(f"{n} windows are too few for the split")
        return {"train": (start, a), "validate": (a, b), "test": (b, stop)}


@dataclass(frozen=True)
class ModelSettings:
    num_layers: int = 2
    num_inducing: int = 64
    hidden_dim: int = None
    noise_variance: float = 0.1
    lags: int = 0
    trend: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass(frozen=True)
class ExperimentConfig:
    target: str
    methods: tuple = METHODS
    split: SplitConfig = field(default_factory=SplitConfig)
    fast: ModelSettings = field(default_factory=ModelSettings)
    slow: ModelSettings = field(default_factory=lambda: ModelSettings(lags=1))
    reference: str = "window_end"
    r_min: float = 0.0
    min_support: int = 24
    num_samples: int = 200
    epsilon: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}")


@dataclass
class TrainedModels:
    slow: object = None
    fast: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    windows: dict
    correlation: object
    models: TrainedModels
    pseudo: dict
    reports: dict

    def table(self, block="test"):
        return [self.reports[block][m] for m in self.config.methods]


def _fit(series_values, index, steps_per_day, settings, seed):
    cfg = replace(settings.train, seed=seed)
    return fit_load_model(series_values, index, steps_per_day, num_layers=settings.num_layers,
                          num_inducing=settings.num_inducing, config=cfg, hidden_dim=settings.hidden_dim,
                          noise_variance=settings.noise_variance, lags=settings.lags, trend=settings.trend)


def train_models(view, corr, config, train_windows, threads=1):
    """Fit the target's slow model and its neighbours' fast models on the training block only.

    Fast models are independent and may train in a pool of ``threads``
    workers; each has its own seed, so the result does not depend on it.
    """
    models = TrainedModels()
    needs_slow = {"CF-DGP", "PB"} & set(config.methods)
    if not needs_slow:
        return models
    T = view.T
    k0, k1 = train_windows
    target = config.target
    slow = view.slow[target]
    idx = np.arange(k0, k1)
    models.slow, models.traces[("slow", target)] = _fit(
        slow.span(k0, k1), idx, view.windows_per_day, config.slow, node_seed(config.seed, target))
    models.slow = models.slow.with_context(slow.values, slow.start_index)
    if "CF-DGP" not in config.methods:
        return models
    fidx = np.arange(k0 * T, k1 * T)
    neighbors = list(select_neighbors(view, corr, target, config.r_min))

    def job(j):
        logger.info("training fast model for %s", j)
        return _fit(view.fast[j].span(k0 * T, k1 * T), fidx, view.steps_per_day, config.fast,
                    node_seed(config.seed, j))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fitted = list(pool.map(job, neighbors))
    else:
        fitted = [job(j) for j in neighbors]
    for j, (model, trace) in zip(neighbors, fitted):
        models.fast[j] = model
        models.traces[("fast", j)] = trace
    return models


def synthesize(view, corr, config, models, windows, means):
    out = {}
    kw = dict(num_samples=config.num_samples, seed=config.seed)
    for method in config.methods:
        if method == "Average":
            out[method] = baseline_average(view, config.target, windows)
        elif method == "CF":
            out[method] = cf_estimate(view, corr, config.target, windows, r_min=config.r_min, means=means)
        elif method == "PB":
            out[method] = baseline_prediction_based(view, config.target, models.slow, windows, **kw)
        else:
            out[method] = cf_dgp_estimate(view, corr, config.target, windows, models.slow, models.fast,
                                          reference=config.reference, r_min=config.r_min, **kw)
    return out


def run_experiment(dataset, config, truth=None, models=None, threads=1):
    """Score every method on the validation and test blocks.

    The target's fast series is hidden from all methods (reading it raises
    ``LeakageDetected``); it is only used, via ``truth`` or the dataset, to
    score.  Correlations, means and models come from the training block.
    """
    target = config.target
    if truth is None:
        if target not in dataset.fast:
            raise DataError(f"no ground truth for {target}")
        truth = dataset.fast[target]
    if target not in dataset.slow:
        raise DataError(f"{target} has no slow series")
    view = dataset.withhold(target)
    slow = view.slow[target]
    blocks = config.split.windows(slow.start_index, slow.end_index)
    corr = correlation_matrix(view, windows=blocks["train"], min_support=config.min_support)
    if models is None:
        models = train_models(view, corr, config, blocks["train"], threads)
    means = None
    if "CF" in config.methods:
        means = historical_means(view, select_neighbors(view, corr, target, config.r_min), target,
                                 blocks["train"])
    pseudo, reports = {}, {}
    T = view.T
    for block in ("validate", "test"):
        k0, k1 = blocks[block]
        if k1 <= k0:
            continue
        pseudo[block] = synthesize(view, corr, config, models, (k0, k1), means)
        true_vals = truth.span(k0 * T, k1 * T)
        reports[block] = {m: score(m, s.mean, true_vals, s.window_index, config.epsilon)
                          for m, s in pseudo[block].items()}
    return ExperimentResult(config, blocks, corr, models, pseudo, reports)


# -- tables ------------------------------------------------------------------------

TABLE_HEADER = ["method", "rmse_kw", "mape_pct", "points", "excluded"]


def write_table_csv(reports, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_HEADER)
        for r in reports:
            w.writerow([r.method, repr(r.rmse), repr(r.mape), r.n_points, r.excluded])


def read_table_csv(path):
    """(method, rmse, mape) rows from a comparison CSV; extra columns are ignored."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows.append((rec["method"], float(rec["rmse_kw"]), float(rec["mape_pct"])))
    return rows


def format_table(reports, title="RMSE and MAPE of different methods"):
    lines = [title, f"{'Method':<8} {'RMSE (kW)':>10} {'MAPE (%)':>9} {'excluded':>9}"]
    for r in reports:
        lines.append(f"{r.method:<8} {r.rmse:>10.4f} {r.mape:>9.4f} {r.excluded:>9d}")
    return "\n".join(lines)


@dataclass(frozen=True)
class Reduction:
    best: float
    baseline: str
    per_baseline: dict


def headline_reductions(rows, proposed="CF-DGP"):
    """Percentage reductions of ``proposed`` relative to every other method.

    ``rows`` holds (method, rmse, mape).  For each metric the largest
    reduction and the baseline attaining it are returned, together with the
    reduction against every baseline.
    """
    table = {m: (r, p) for m, r, p in rows}
    if proposed not in table:
        raise DataError(f"{proposed} is not in the table")
    out = {}
    for col, name in ((0, "rmse"), (1, "mape")):
        mine = table[proposed][col]
        per = {m: 100.0 * (v[col] - mine) / v[col] for m, v in table.items() if m != proposed}
        if not per:
            raise DataError("no baseline rows to compare against")
        best = max(per, key=per.get)
        out[name] = Reduction(per[best], best, per)
    return out


def format_reductions(red, proposed="CF-DGP"):
    lines = []
    for name in ("rmse", "mape"):
        r = red[name]
        lines.append(f"{name.upper()} reduced by at most {r.best:.2f}% (vs {r.baseline})")
        for m, v in r.per_baseline.items():
            lines.append(f"  {proposed} vs {m}: {v:.2f}%")
    return "\n".join(lines)


# -- regression comparison (single series) ----------------------------------------

def regression_table(values, index, steps_per_day, train_len, settings, val_fraction=0.2,
                     num_samples=200, epsilon=1e-3, seed=0):
    """Validation/test MAPE of several regressors on one series.

    Each model in ``settings`` (name -> ModelSettings) is fitted on the first
    ``train_len`` points; validation is the last ``val_fraction`` of that
    block and test is everything after it.
    """
    values = np.asarray(values, dtype=float)
    index = np.asarray(index)
    v0 = int(round(train_len * (1.0 - val_fraction)))
    rows = []
    for name, s in settings.items():
        model, _ = _fit(values[:train_len], index[:train_len], steps_per_day, s, seed)
        val = model.predict(index[v0:train_len], num_samples=num_samples, seed=seed).mean
        test = model.predict(index[train_len:], num_samples=num_samples, seed=seed).mean
        ok_v = np.isfinite(values[v0:train_len])
        ok_t = np.isfinite(values[train_len:])
        rows.append((name, mape(val[ok_v], values[v0:train_len][ok_v], epsilon),
                     mape(test[ok_t], values[train_len:][ok_t], epsilon)))
    return rows


# -- synthetic benchmark -------------------------------------------------------------

def benchmark_spec(n_days=30, gross_error_rate=0.01, gross_error_magnitude=5.0):
    """The 10-node benchmark: peaky residential loads, two shared factors, RTU spikes."""
    return SyntheticSpec(n_nodes=10, n_days=n_days, T=12, delta_t=1.0 / 12.0, n_smart_meter_only=1,
                         noise_std=0.05, factor_scale=0.25, factor_lengthscale=4.0,
                         gross_error_rate=gross_error_rate, gross_error_magnitude=gross_error_magnitude)


def benchmark_config(target="bus1001", reference="window_end", seed=0):
    """Experiment settings sized so five benchmark seeds fit in a few minutes."""
    return ExperimentConfig(
        target=target,
        fast=ModelSettings(train=TrainConfig(iterations=600, mc_samples=3, seed=seed)),
        slow=ModelSettings(lags=1, train=TrainConfig(iterations=2000, mc_samples=3, seed=seed)),
        reference=reference,
        num_samples=50,
        seed=seed,
    )


def nonstationary_spec(n_days=30):
    """Single-node series with sharp sub-hour peaks and a slow growth trend."""
    return SyntheticSpec(n_nodes=1, n_days=n_days, n_smart_meter_only=0, noise_std=0.05,
                         factor_scale=0.05, factor_lengthscale=4.0, trend_per_day=0.005)


def depth_settings(num_inducing=16, iterations=1000):
    cfg = TrainConfig(iterations=iterations, mc_samples=3)
    return {
        "SVGP": ModelSettings(num_layers=1, num_inducing=num_inducing, trend=False, train=cfg),
        "DGP": ModelSettings(num_layers=2, num_inducing=num_inducing, trend=False, train=cfg),
    }
