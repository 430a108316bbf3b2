"""Two-time-scale load data: series types, aggregation, CSV I/O, synthetic data.

Fast series hold power (kW) on a grid of ``delta_t`` hours; slow series hold
per-window energy (kWh) on a grid ``T`` times coarser.  Slow index ``k``
covers fast indices ``[k*T, (k+1)*T)``.  Missing readings are NaN and are
never dropped or imputed here.
"""

import csv
import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from types import MappingProxyType

import numpy as np

from .errors import (
    AlignmentError,
    InvalidSpec,
    LeakageDetected,
    MissingValueInWindow,
    NonMultipleLength,
    ParseError,
)

logger = logging.getLogger(__name__)

FAST = "fast"
SLOW = "slow"
CSV_HEADER = ["timestamp", "node_id", "value", "scale"]
EPOCH = datetime(2017, 6, 1, tzinfo=timezone.utc)


@dataclass(frozen=True, eq=False)
class LoadSeries:
    """One node's readings at one time scale, starting at ``start_index``."""

    node_id: str
    scale: str
    start_index: int
    values: np.ndarray
    allow_negative: bool = False

    def __post_init__(self):
        if self.scale not in (FAST, SLOW):
            raise ValueError(f"scale must be {FAST!r} or {SLOW!r}, got {self.scale!r}")
        values = np.array(self.values, dtype=float).ravel()
        if np.any(np.isinf(values)):
            raise ValueError(f"{self.node_id}: infinite readings are not allowed")
        if self.scale == SLOW and not self.allow_negative and np.any(values[~np.isnan(values)] < 0):
            raise ValueError(f"{self.node_id}: negative energy needs allow_negative")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "start_index", int(self.start_index))

    def __len__(self):
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, LoadSeries):
            return NotImplemented
        return (self.node_id == other.node_id and self.scale == other.scale
                and self.start_index == other.start_index
                and np.array_equal(self.values, other.values, equal_nan=True))

    __hash__ = None

    @property
    def index(self):
        return np.arange(self.start_index, self.start_index + self.values.size)

    @property
    def end_index(self):
        return self.start_index + self.values.size

    @property
    def missing(self):
        return np.isnan(self.values)

    def span(self, lo, hi):
        """Values on the global index range [lo, hi); NaN where not covered."""
        out = np.full(hi - lo, np.nan)
        a, b = max(lo, self.start_index), min(hi, self.end_index)
        if b > a:
            out[a - lo:b - lo] = self.values[a - self.start_index:b - self.start_index]
        return out


class _Withheld(Mapping):
    """Read-only view of a series map that refuses to hand out certain nodes."""

    def __init__(self, data, hidden):
        self._data = data
        self._hidden = frozenset(hidden)

    def __getitem__(self, key):
        if key in self._hidden:
            raise LeakageDetected(f"fast series of {key!r} is withheld from estimators")
        return self._data[key]

    def __iter__(self):
        return (k for k in self._data if k not in self._hidden)

    def __len__(self):
        return sum(1 for _ in self)

    def __contains__(self, key):
        return key in self._data and key not in self._hidden


@dataclass(frozen=True, eq=False)
class TwoScaleDataset:
    """Fast power and slow energy series for many nodes on a shared grid."""

    fast: Mapping
    slow: Mapping
    T: int = 12
    delta_t: float = 1.0 / 12.0
    origin: datetime = EPOCH

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise AlignmentError(f"T must be a positive integer, got {self.T}")
        if not self.delta_t > 0:
            raise AlignmentError("delta_t must be positive")
        for scale, series_map in ((FAST, self.fast), (SLOW, self.slow)):
            for node in series_map:
                s = series_map[node]
                if s.scale != scale or s.node_id != node:
                    raise AlignmentError(f"series {node!r} filed under {scale} maps is inconsistent")
        if not isinstance(self.fast, _Withheld):
            object.__setattr__(self, "fast", MappingProxyType(dict(self.fast)))
        object.__setattr__(self, "slow", MappingProxyType(dict(self.slow)))
        object.__setattr__(self, "T", int(self.T))
        origin = self.origin if self.origin.tzinfo else self.origin.replace(tzinfo=timezone.utc)
        object.__setattr__(self, "origin", origin)

    def __eq__(self, other):
        if not isinstance(other, TwoScaleDataset):
            return NotImplemented
        return (self.T == other.T and math.isclose(self.delta_t, other.delta_t, rel_tol=1e-12)
                and self.origin == other.origin
                and dict(self.fast.items()) == dict(other.fast.items())
                and dict(self.slow.items()) == dict(other.slow.items()))

    __hash__ = None

    @property
    def nodes(self):
        return sorted(set(self.fast) | set(self.slow))

    @property
    def steps_per_day(self):
        return int(round(24.0 / self.delta_t))

    @property
    def windows_per_day(self):
        return self.steps_per_day // self.T

    def fast_timestamp(self, index):
        return self.origin + timedelta(hours=float(index) * self.delta_t)

    def slow_timestamp(self, k):
        return self.origin + timedelta(hours=float(k) * self.T * self.delta_t)

    def withhold(self, *nodes):
        """Same data, but reading the fast series of ``nodes`` raises LeakageDetected."""
        fast = self.fast._data if isinstance(self.fast, _Withheld) else dict(self.fast)
        hidden = set(nodes) | (self.fast._hidden if isinstance(self.fast, _Withheld) else set())
        return TwoScaleDataset(_Withheld(fast, hidden), self.slow, self.T, self.delta_t, self.origin)


def aggregate_fast_to_slow(series, T, delta_t, strict=False, allow_negative=None):
    """Per-window energy: W_k = sum of P_t * delta_t over t in [kT, (k+1)T).

    A window containing a missing reading yields a missing (NaN) energy value;
    with ``strict`` it raises ``MissingValueInWindow`` instead.
    """
    if series.scale != FAST:
        raise ValueError("aggregation needs a fast series")
    if int(T) != T or T < 1:
        raise AlignmentError("T must be a positive integer")
    if len(series) % T:
        raise NonMultipleLength(f"{series.node_id}: length {len(series)} is not a multiple of T={T}")
    if series.start_index % T:
        raise AlignmentError(f"{series.node_id}: start index {series.start_index} is not on the slow grid")
    windows = series.values.reshape(-1, T)
    energy = windows.sum(axis=1) * delta_t
    gaps = int(np.isnan(energy).sum())
    if gaps:
        if strict:
            raise MissingValueInWindow(f"{series.node_id}: {gaps} window(s) contain missing readings")
        logger.info("%s: %d slow window(s) flagged missing", series.node_id, gaps)
    if allow_negative is None:
        allow_negative = series.allow_negative or bool(np.any(energy[~np.isnan(energy)] < 0))
    return LoadSeries(series.node_id, SLOW, series.start_index // T, energy, allow_negative)


# -- CSV -----------------------------------------------------------------------

@dataclass
class IngestConfig:
    T: int = 12
    delta_t: float = 1.0 / 12.0
    strict: bool = True
    allow_negative: bool = False


@dataclass
class IngestReport:
    rows_read: int = 0
    rows_accepted: int = 0
    rejected: list = field(default_factory=list)
    gaps: dict = field(default_factory=dict)

    @property
    def gap_count(self):
        return sum(self.gaps.values())

    def summary_lines(self, dataset):
        lines = [
            f"rows read: {self.rows_read}",
            f"rows accepted: {self.rows_accepted}",
            f"rows rejected: {len(self.rejected)}",
            f"fast nodes: {len(dataset.fast)}",
            f"slow nodes: {len(dataset.slow)}",
            f"T: {dataset.T}, delta_t: {dataset.delta_t:.6g} h, origin: {dataset.origin.isoformat()}",
        ]
        for scale, maps in ((FAST, dataset.fast), (SLOW, dataset.slow)):
            for node in sorted(maps):
                s = maps[node]
                lines.append(f"{scale} {node}: index {s.start_index}..{s.end_index - 1}, "
                             f"missing {self.gaps.get((node, scale), 0)}")
        for row, reason in self.rejected:
            lines.append(f"rejected row {row}: {reason}")
        return lines


def parse_timestamp(text):
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def _parse_row(row):
    if len(row) != 4:
        raise ValueError(f"expected 4 fields, found {len(row)}")
    ts_text, node, value_text, scale = (x.strip() for x in row)
    try:
        ts = parse_timestamp(ts_text)
    except ValueError:
        raise ValueError(f"bad timestamp {ts_text!r}") from None
    if not node:
        raise ValueError("empty node_id")
    scale = scale.lower()
    if scale not in (FAST, SLOW):
        raise ValueError(f"scale must be fast or slow, got {scale!r}")
    if value_text == "" or value_text.lower() == "nan":
        value = np.nan
    else:
        try:
            value = float(value_text)
        except ValueError:
            raise ValueError(f"bad value {value_text!r}") from None
        if not math.isfinite(value):
            raise ValueError(f"non-finite value {value_text!r}")
    return ts, node, value, scale


def _grid_offset(ts, origin, step_hours):
    steps = (ts - origin).total_seconds() / 3600.0 / step_hours
    k = round(steps)
    if abs(steps - k) > 1e-6:
        return None
    return int(k)


def read_csv(path, config=None):
    """Parse a ``timestamp,node_id,value,scale`` file into a dataset and a report."""
    config = config or IngestConfig()
    report = IngestReport()
    records = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise ParseError(1, f"header must be {','.join(CSV_HEADER)}")
        for rownum, row in enumerate(reader, start=2):
            if not row or all(not x.strip() for x in row):
                continue
            report.rows_read += 1
            try:
                ts, node, value, scale = _parse_row(row)
                if scale == SLOW and not config.allow_negative and value < 0:
                    raise ValueError("negative energy reading")
                key = (node, scale, ts)
                if key in records:
                    raise ValueError(f"duplicate reading for {node} {scale} at {ts.isoformat()}")
            except ValueError as exc:
                if config.strict:
                    raise ParseError(rownum, str(exc)) from None
                report.rejected.append((rownum, str(exc)))
                continue
            records[key] = value
            report.rows_accepted += 1

    if not records:
        raise ParseError(1, "no data rows")
    window_hours = config.T * config.delta_t
    slow_ts = [ts for (_, scale, ts) in records if scale == SLOW]
    fast_ts = [ts for (_, scale, ts) in records if scale == FAST]
    origin = min(slow_ts) if slow_ts else min(fast_ts)
    if fast_ts and min(fast_ts) < origin:
        back = math.ceil((origin - min(fast_ts)).total_seconds() / 3600.0 / window_hours)
        origin = origin - timedelta(hours=back * window_hours)

    grouped = {}
    for (node, scale, ts), value in records.items():
        step = window_hours if scale == SLOW else config.delta_t
        k = _grid_offset(ts, origin, step)
        if k is None:
            raise AlignmentError(f"{scale} reading of {node} at {ts.isoformat()} is off the "
                                 f"{step:.6g} h grid anchored at {origin.isoformat()}")
        grouped.setdefault((node, scale), {})[k] = value

    fast, slow = {}, {}
    for (node, scale), points in grouped.items():
        lo, hi = min(points), max(points) + 1
        values = np.full(hi - lo, np.nan)
        for k, v in points.items():
            values[k - lo] = v
        series = LoadSeries(node, scale, lo, values, config.allow_negative)
        report.gaps[(node, scale)] = int(series.missing.sum())
        (fast if scale == FAST else slow)[node] = series
    dataset = TwoScaleDataset(dict(sorted(fast.items())), dict(sorted(slow.items())),
                              config.T, config.delta_t, origin)
    return dataset, report


def ingest_csv(path, config=None):
    dataset, report = read_csv(path, config)
    for line in report.summary_lines(dataset)[:3]:
        logger.info(line)
    return dataset


def _iso(ts):
    return ts.astimezone(timezone.utc).isoformat()


def _fmt(v):
    return "" if np.isnan(v) else repr(float(v))


def emit_csv(dataset, path, fast=None):
    """Write ``dataset`` in the ingest schema; missing readings become empty values.

    ``fast`` optionally overrides the fast map (e.g. to write ground truth).
    """
    fast_map = dataset.fast if fast is None else fast
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for node in sorted(fast_map):
            s = fast_map[node]
            for k, v in zip(s.index, s.values):
                w.writerow([_iso(dataset.fast_timestamp(k)), node, _fmt(v), FAST])
        for node in sorted(dataset.slow):
            s = dataset.slow[node]
            for k, v in zip(s.index, s.values):
                w.writerow([_iso(dataset.slow_timestamp(k)), node, _fmt(v), SLOW])


# -- synthetic data --------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Recipe for a correlated multi-node load set.

    Load of node i at fast step t::

        scale_i * shape(hour) * day_level(day) + factor_scale * sum_k w_ik f_k(t) + noise

    ``f_k`` are unit-variance smooth random functions (RBF covariance with
    ``factor_lengthscale`` hours).  ``day_level`` applies ``trend_per_day``
    growth and the ``weekend_factor``.  Gross errors are additive spikes of
    ``gross_error_magnitude`` times the node's load standard deviation,
    injected into the exposed fast (RTU) streams only.
    """

    n_nodes: int = 10
    n_days: int = 30
    T: int = 12
    delta_t: float = 1.0 / 12.0
    n_smart_meter_only: int = 1
    profile: object = "residential"
    node_scale_spread: float = 0.1
    n_factors: int = 2
    factor_weights: object = None
    factor_scale: float = 0.4
    factor_lengthscale: float = 3.0
    noise_std: float = 0.15
    gross_error_rate: float = 0.0
    gross_error_magnitude: float = 5.0
    trend_per_day: float = 0.0
    weekend_factor: float = 1.0
    allow_negative: bool = False
    start: str = "2017-06-01T00:00:00+00:00"

    def validate(self):
        if self.n_nodes < 1 or self.n_days < 1 or self.T < 1 or self.n_factors < 0:
            raise InvalidSpec("node, day, T and factor counts must be positive")
        if not self.delta_t > 0:
            raise InvalidSpec("delta_t must be positive")
        steps = 24.0 / self.delta_t
        if abs(steps - round(steps)) > 1e-9 or round(steps) % self.T:
            raise InvalidSpec("a day must hold a whole number of slow windows")
        if not 0 <= self.n_smart_meter_only <= self.n_nodes:
            raise InvalidSpec("n_smart_meter_only must lie in [0, n_nodes]")
        if not 0.0 <= self.gross_error_rate <= 1.0:
            raise InvalidSpec("gross_error_rate must lie in [0, 1]")
        if self.noise_std < 0 or self.factor_scale < 0 or self.factor_lengthscale <= 0:
            raise InvalidSpec("noise/factor scales must be non-negative, lengthscale positive")
        if not 0 <= self.node_scale_spread < 1:
            raise InvalidSpec("node_scale_spread must lie in [0, 1)")
        if self.factor_weights is not None:
            w = np.asarray(self.factor_weights, dtype=float)
            if w.shape != (self.n_nodes, self.n_factors):
                raise InvalidSpec(f"factor_weights must have shape ({self.n_nodes}, {self.n_factors})")
            if np.any(np.abs(w) > 1):
                raise InvalidSpec("factor weights must lie in [-1, 1]")


def node_names(n):
    return [f"bus{1001 + i}" for i in range(n)]


def residential_shape(hours):
    """Peaky household profile in kW: night base, morning and evening peaks."""
    h = np.mod(hours, 24.0)

    def bump(centre, width):
        d = np.minimum(np.abs(h - centre), 24.0 - np.abs(h - centre))
        return np.exp(-0.5 * (d / width) ** 2)

    return 1.5 + 2.0 * bump(7.5, 0.7) + 0.6 * bump(13.0, 2.0) + 3.0 * bump(19.5, 0.8)


def _profile(spec, hours):
    if isinstance(spec.profile, str):
        if spec.profile != "residential":
            raise InvalidSpec(f"unknown profile {spec.profile!r}")
        return residential_shape(hours)
    hourly = np.asarray(spec.profile, dtype=float)
    if hourly.ndim != 1 or hourly.size != 24:
        raise InvalidSpec("a custom profile needs 24 hourly values")
    return np.interp(np.mod(hours, 24.0), np.arange(24) + 0.5, hourly, period=24.0)


def smooth_factors(rng, hours, n_factors, lengthscale, n_features=256):
    """Unit-variance random functions with RBF covariance (random Fourier features)."""
    out = np.empty((n_factors, hours.size))
    for k in range(n_factors):
        omega = rng.normal(0.0, 1.0 / lengthscale, n_features)
        phase = rng.uniform(0.0, 2.0 * np.pi, n_features)
        out[k] = np.sqrt(2.0 / n_features) * np.cos(np.outer(hours, omega) + phase).sum(axis=1)
    return out


def generate_synthetic(spec, seed=0, return_flags=False):
    """Correlated synthetic loads.

    Returns ``(dataset, ground_truth)`` and, with ``return_flags``, a third
    map of boolean gross-error masks.  The dataset has slow energy for every
    node and fast readings (with gross errors) only for RTU nodes; the first
    ``n_smart_meter_only`` nodes are smart-meter only.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    steps_per_day = int(round(24.0 / spec.delta_t))
    n = spec.n_days * steps_per_day
    hours = np.arange(n) * spec.delta_t
    day = np.floor(hours / 24.0)
    level = 1.0 + spec.trend_per_day * day
    level = level * np.where(np.mod(day, 7) >= 5, spec.weekend_factor, 1.0)
    shape = _profile(spec, hours) * level

    names = node_names(spec.n_nodes)
    scales = rng.uniform(1.0 - spec.node_scale_spread, 1.0 + spec.node_scale_spread, spec.n_nodes)
    if spec.factor_weights is None:
        weights = rng.uniform(0.3, 1.0, (spec.n_nodes, spec.n_factors))
    else:
        weights = np.asarray(spec.factor_weights, dtype=float)
    factors = smooth_factors(rng, hours, spec.n_factors, spec.factor_lengthscale)
    common = spec.factor_scale * (weights @ factors) if spec.n_factors else np.zeros((spec.n_nodes, n))

    truth, fast, slow, flags = {}, {}, {}, {}
    for i, node in enumerate(names):
        p = scales[i] * shape + common[i] + spec.noise_std * rng.standard_normal(n)
        if not spec.allow_negative:
            p = np.maximum(p, 0.0)
        truth[node] = LoadSeries(node, FAST, 0, p, spec.allow_negative)
        slow[node] = aggregate_fast_to_slow(truth[node], spec.T, spec.delta_t,
                                            allow_negative=spec.allow_negative)
        mask = rng.random(n) < spec.gross_error_rate
        sign = rng.choice([-1.0, 1.0], n)
        if i >= spec.n_smart_meter_only:
            spikes = np.where(mask, sign * spec.gross_error_magnitude * p.std(), 0.0)
            fast[node] = LoadSeries(node, FAST, 0, p + spikes, True)
            flags[node] = mask
        else:
            flags[node] = np.zeros(n, dtype=bool)

    dataset = TwoScaleDataset(fast, slow, spec.T, spec.delta_t, parse_timestamp(spec.start))
    if return_flags:
        return dataset, truth, flags
    return dataset, truth
