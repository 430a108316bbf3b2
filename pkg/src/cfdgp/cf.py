"""Correlation-weighted fusion of neighbour streams into fast pseudo-measurements.

Windows are given as a half-open range of slow indices ``(k0, k1)``; the
pseudo series then covers fast indices ``[k0*T, k1*T)``.  Powers are in kW,
energies in kWh.
"""

import csv
import logging
import zlib
from dataclasses import dataclass

import numpy as np

from .data import parse_timestamp
from .errors import (
    InsufficientSupport,
    MissingSlowReading,
    NoUsableNeighbors,
    ParseError,
    UntrainedModel,
    ZeroVariance,
    ZeroWeightSum,
)
from .gpcore import GaussianPrediction

logger = logging.getLogger(__name__)

METHODS = ("Average", "PB", "CF", "CF-DGP")
REFERENCES = ("window_end", "window_mean")
PSEUDO_HEADER = ["node_id", "method", "timestamp", "mean_kw", "var_kw2", "window_ts"]


def pearson(wi, wj, min_support=24):
    """Pearson coefficient over the slots where both series are observed."""
    wi = np.asarray(wi, dtype=float)
    wj = np.asarray(wj, dtype=float)
    both = np.isfinite(wi) & np.isfinite(wj)
    n = int(both.sum())
    if n < max(min_support, 2):
        raise InsufficientSupport(f"only {n} overlapping readings (need {max(min_support, 2)})")
    a = wi[both] - wi[both].mean()
    b = wj[both] - wj[both].mean()
    den = np.sqrt(a @ a) * np.sqrt(b @ b)
    if den == 0:
        raise ZeroVariance("a series is constant over the overlap")
    return float(np.clip((a @ b) / den, -1.0, 1.0))


@dataclass(frozen=True, eq=False)
class CorrelationMatrix:
    """Pairwise coefficients; ``r`` is NaN wherever ``usable`` is False."""

    nodes: tuple
    r: np.ndarray
    support: np.ndarray
    usable: np.ndarray
    reasons: dict

    def index(self, node):
        return self.nodes.index(node)

    def coefficient(self, i, j):
        a, b = self.index(i), self.index(j)
        if not self.usable[a, b]:
            raise self.reasons.get((i, j), ZeroVariance)(f"r({i}, {j}) is unusable")
        return float(self.r[a, b])

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["node_id"] + list(self.nodes))
            for a, node in enumerate(self.nodes):
                w.writerow([node] + [repr(float(x)) if ok else "unusable"
                                     for x, ok in zip(self.r[a], self.usable[a])])

    def to_grid_csv(self, path):
        """Long format (row, col, r, support, usable) for heatmap tools."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "col", "r", "support", "usable"])
            for a, ni in enumerate(self.nodes):
                for b, nj in enumerate(self.nodes):
                    r = repr(float(self.r[a, b])) if self.usable[a, b] else ""
                    w.writerow([ni, nj, r, int(self.support[a, b]), int(self.usable[a, b])])


def correlation_matrix(dataset, nodes=None, windows=None, min_support=24):
    """Coefficients between the slow energy series of ``nodes``.

    ``windows`` restricts the computation to a slow index range.
    """
    nodes = tuple(sorted(dataset.slow) if nodes is None else nodes)
    if windows is None:
        lo = min(dataset.slow[n].start_index for n in nodes)
        hi = max(dataset.slow[n].end_index for n in nodes)
    else:
        lo, hi = windows
    W = np.vstack([dataset.slow[n].span(lo, hi) for n in nodes])
    k = len(nodes)
    r = np.full((k, k), np.nan)
    usable = np.zeros((k, k), dtype=bool)
    obs = np.isfinite(W)
    support = (obs[:, None, :] & obs[None, :, :]).sum(axis=-1)
    reasons = {}
    for a in range(k):
        for b in range(a, k):
            try:
                value = pearson(W[a], W[b], min_support)
            except (InsufficientSupport, ZeroVariance) as exc:
                reasons[(nodes[a], nodes[b])] = reasons[(nodes[b], nodes[a])] = type(exc)
                logger.info("r(%s, %s) unusable: %s", nodes[a], nodes[b], exc)
                continue
            if a == b:
                value = 1.0
            r[a, b] = r[b, a] = value
            usable[a, b] = usable[b, a] = True
    return CorrelationMatrix(nodes, r, support, usable, reasons)


@dataclass(frozen=True, eq=False)
class PseudoSeries:
    """Fast-scale estimates for one node; ``variance`` is NaN when not modelled."""

    node_id: str
    method: str
    start_index: int
    mean: np.ndarray
    variance: np.ndarray
    window_index: np.ndarray

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        mean = np.asarray(self.mean, dtype=float)
        if not np.all(np.isfinite(mean)):
            raise ValueError("pseudo means must be finite")
        var = np.full(mean.shape, np.nan) if self.variance is None else np.asarray(self.variance, dtype=float)
        for name, arr in (("mean", mean), ("variance", var),
                          ("window_index", np.asarray(self.window_index, dtype=int))):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __len__(self):
        return self.mean.size

    @property
    def index(self):
        return np.arange(self.start_index, self.start_index + self.mean.size)


def write_pseudo_csv(series_list, dataset, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PSEUDO_HEADER)
        for s in series_list:
            for t, m, v, k in zip(s.index, s.mean, s.variance, s.window_index):
                w.writerow([s.node_id, s.method, dataset.fast_timestamp(t).isoformat(), repr(float(m)),
                            "" if np.isnan(v) else repr(float(v)), dataset.slow_timestamp(k).isoformat()])


def read_pseudo_csv(path, dataset):
    """Inverse of ``write_pseudo_csv`` given the dataset that fixes the time grid."""
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != PSEUDO_HEADER:
            raise ParseError(1, f"header must be {','.join(PSEUDO_HEADER)}")
        for rownum, rec in enumerate(reader, start=2):
            try:
                node, method, ts, mean, var, _ = rec
                hours = (parse_timestamp(ts) - dataset.origin).total_seconds() / 3600.0
                t = int(round(hours / dataset.delta_t))
                rows.setdefault((node, method), []).append((t, float(mean), float(var) if var else np.nan))
            except ValueError as exc:
                raise ParseError(rownum, str(exc)) from None
    out = []
    for (node, method), recs in rows.items():
        t, m, v = (np.array(x) for x in zip(*recs))
        if np.any(np.diff(t) != 1):
            raise ParseError(1, f"{node}/{method}: rows are not a contiguous fast range")
        out.append(PseudoSeries(node, method, int(t[0]), m, v, t // dataset.T))
    return out


def _fast_range(dataset, windows):
    k0, k1 = windows
    if k1 <= k0:
        raise ValueError("empty window range")
    return np.arange(k0 * dataset.T, k1 * dataset.T)


def _window_of(dataset, idx):
    return idx // dataset.T


def _slow_values(dataset, node, windows):
    return dataset.slow[node].span(*windows)


def historical_means(dataset, nodes, target, history):
    """Historical means for the fusion rules: fast means for RTU nodes, W-bar/(T dt) for the target."""
    k0, k1 = history
    means = {}
    for j in nodes:
        vals = dataset.fast[j].span(k0 * dataset.T, k1 * dataset.T)
        if not np.any(np.isfinite(vals)):
            raise MissingSlowReading(f"no fast history for {j} in windows {k0}..{k1}")
        means[j] = float(np.nanmean(vals))
    w = _slow_values(dataset, target, history)
    if not np.any(np.isfinite(w)):
        raise MissingSlowReading(f"no slow history for {target} in windows {k0}..{k1}")
    means[target] = float(np.nanmean(w)) / (dataset.T * dataset.delta_t)
    return means


def select_neighbors(dataset, corr, target, r_min=0.0):
    """Usable RTU neighbours of ``target`` and their coefficients, in sorted order."""
    if target not in corr.nodes:
        raise NoUsableNeighbors(f"{target} is not in the correlation matrix")
    a = corr.index(target)
    chosen = {}
    for j in sorted(dataset.fast):
        if j == target or j not in corr.nodes:
            continue
        b = corr.index(j)
        if corr.usable[a, b] and abs(corr.r[a, b]) >= r_min:
            chosen[j] = float(corr.r[a, b])
    if not chosen:
        raise NoUsableNeighbors(f"{target} has no usable neighbour with a fast series")
    if sum(abs(r) for r in chosen.values()) == 0:
        raise ZeroWeightSum(f"all coefficients of {target}'s neighbours are zero")
    return chosen


def _weighted_trend(deviations, weights):
    """sum_j r_j d_j / sum_j |r_j| per instant, over the neighbours observed there.

    Instants where no neighbour is observed get a zero trend.
    """
    D = np.vstack(deviations)
    r = np.asarray(weights)[:, None]
    obs = np.isfinite(D)
    num = np.where(obs, D * r, 0.0).sum(axis=0)
    den = np.where(obs, np.abs(r), 0.0).sum(axis=0)
    out = np.zeros(D.shape[1])
    np.divide(num, den, out=out, where=den > 0)
    return out


def cf_estimate(dataset, corr, target, windows, history=None, r_min=0.0, means=None):
    """Plain correlation fusion of live neighbour readings around historical means.

    ``history`` (slow index range) sets the means; it defaults to every window
    before ``windows``.  Precomputed ``means`` may be passed instead.
    """
    idx = _fast_range(dataset, windows)
    neighbors = select_neighbors(dataset, corr, target, r_min)
    if means is None:
        history = history or (0, windows[0])
        means = historical_means(dataset, neighbors, target, history)
    devs = [dataset.fast[j].span(idx[0], idx[-1] + 1) - means[j] for j in neighbors]
    mean = means[target] + _weighted_trend(devs, list(neighbors.values()))
    return PseudoSeries(target, "CF", idx[0], mean, None, _window_of(dataset, idx))


class FixedForecast:
    """Stand-in model returning stored values (useful for oracles and tests)."""

    def __init__(self, values, start_index=0, variance=None):
        self.values = np.asarray(values, dtype=float)
        self.start_index = int(start_index)
        self.variance = np.zeros_like(self.values) if variance is None else np.asarray(variance, float)

    def predict(self, index, num_samples=None, seed=None):
        pos = np.asarray(index, dtype=int) - self.start_index
        if np.any(pos < 0) or np.any(pos >= self.values.size):
            raise IndexError("forecast requested outside the stored range")
        return GaussianPrediction(self.values[pos], self.variance[pos])


def node_seed(seed, node):
    return (int(seed) * 1000003 + zlib.crc32(node.encode())) % 2**32


def _predict(model, node, index, num_samples, seed):
    if model is None:
        raise UntrainedModel(f"no trained model for {node}")
    return model.predict(index, num_samples=num_samples, seed=node_seed(seed, node))


def cf_dgp_estimate(dataset, corr, target, windows, slow_model, fast_models, reference="window_end",
                    r_min=0.0, num_samples=200, seed=0):
    """Fusion of a predicted window energy with GP-mean trends of the neighbours.

    p_t = W~_k / (T dt) + sum_j r_j (p~_{j,t} - p~_{j,ref}) / sum_j |r_j|

    ``reference="window_end"`` uses p~ at the first instant after the window;
    ``"window_mean"`` uses the mean of p~ over the window.  Variances are
    propagated assuming every predicted term is independent.
    """
    if reference not in REFERENCES:
        raise ValueError(f"reference must be one of {REFERENCES}")
    T, dt = dataset.T, dataset.delta_t
    k0, k1 = windows
    idx = _fast_range(dataset, windows)
    neighbors = select_neighbors(dataset, corr, target, r_min)
    weights = np.array(list(neighbors.values()))
    share = weights / np.abs(weights).sum()

    slow = _predict(slow_model, target, np.arange(k0, k1), num_samples, seed)
    base = np.repeat(slow.mean, T) / (T * dt)
    var = np.repeat(slow.variance, T) / (T * dt) ** 2

    trend = np.zeros(idx.size)
    ext = np.arange(idx[0], idx[-1] + 2)
    for c, j in zip(share, neighbors):
        pred = _predict(fast_models.get(j), j, ext, num_samples, seed)
        m, v = pred.mean[:-1], pred.variance[:-1]
        if reference == "window_end":
            ref_m = np.repeat(pred.mean[T::T], T)
            ref_v = np.repeat(pred.variance[T::T], T)
        else:
            ref_m = np.repeat(m.reshape(-1, T).mean(axis=1), T)
            ref_v = np.repeat(v.reshape(-1, T).sum(axis=1) / T**2, T)
        trend += c * (m - ref_m)
        var += c * c * (v + ref_v)
    return PseudoSeries(target, "CF-DGP", idx[0], base + trend, var, _window_of(dataset, idx))


def baseline_average(dataset, target, windows):
    """Window energy spread evenly: W_k / (T dt) on every fast instant."""
    w = _slow_values(dataset, target, windows)
    if np.any(~np.isfinite(w)):
        bad = windows[0] + int(np.flatnonzero(~np.isfinite(w))[0])
        raise MissingSlowReading(f"{target} has no slow reading for window {bad}")
    idx = _fast_range(dataset, windows)
    mean = np.repeat(w, dataset.T) / (dataset.T * dataset.delta_t)
    return PseudoSeries(target, "Average", idx[0], mean, None, _window_of(dataset, idx))


def baseline_prediction_based(dataset, target, slow_model, windows, num_samples=200, seed=0):
    """Linear interpolation from the previous window's average power to the predicted one.

    Inside window k the first instant carries W_{k-1}/(T dt) and the last
    W~_k/(T dt), with straight-line values in between.
    """
    T, dt = dataset.T, dataset.delta_t
    k0, k1 = windows
    prev = dataset.slow[target].span(k0 - 1, k1 - 1)
    if np.any(~np.isfinite(prev)):
        bad = k0 - 1 + int(np.flatnonzero(~np.isfinite(prev))[0])
        raise MissingSlowReading(f"{target} has no slow reading for window {bad}")
    pred = _predict(slow_model, target, np.arange(k0, k1), num_samples, seed)
    a = prev / (T * dt)
    b = pred.mean / (T * dt)
    frac = np.arange(T) / (T - 1) if T > 1 else np.ones(1)
    mean = (a[:, None] + (b - a)[:, None] * frac[None, :]).ravel()
    idx = _fast_range(dataset, windows)
    return PseudoSeries(target, "PB", idx[0], mean, None, _window_of(dataset, idx))


@dataclass(frozen=True)
class EnergyGap:
    window: int
    actual_kwh: float
    pseudo_kwh: float

    @property
    def gap_kwh(self):
        return self.pseudo_kwh - self.actual_kwh


def energy_consistency(series, dataset):
    """Per-window energy implied by a pseudo series versus the metered reading."""
    T, dt = dataset.T, dataset.delta_t
    k0 = series.start_index // T
    implied = series.mean.reshape(-1, T).sum(axis=1) * dt
    actual = dataset.slow[series.node_id].span(k0, k0 + implied.size)
    return [EnergyGap(k0 + i, float(a), float(p)) for i, (a, p) in enumerate(zip(actual, implied))]
