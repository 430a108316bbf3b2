"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import plotting
from .cf import (
    correlation_matrix,
    historical_means,
    read_pseudo_csv,
    select_neighbors,
    write_pseudo_csv,
)
from .config import load_config
from .data import (
    FAST,
    SLOW,
    IngestConfig,
    SyntheticSpec,
    emit_csv,
    generate_synthetic,
    read_csv,
)
from .errors import CfdgpError, ConfigError, DataError
from .evaluation import (
    format_reductions,
    format_table,
    headline_reductions,
    read_table_csv,
    score,
    synthesize,
    train_models,
    write_table_csv,
)
from .store import fingerprint, load_model, save_model

logger = logging.getLogger("cfdgp")


# -- shared helpers -------------------------------------------------------------------

def _config(args, **extra):
    overrides = {"seed": args.seed, "out": args.out, "threads": args.threads}
    for key in ("data", "truth", "target", "reference"):
        overrides[key] = getattr(args, key, None)
    overrides.update(extra)
    return load_config(args.config, overrides)


def _out(cfg, *parts):
    path = os.path.join(cfg.out, *parts)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    return path


def _write_config(cfg):
    with open(_out(cfg, "config.json"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_json())


def _ingest_config(cfg):
    return IngestConfig(cfg.T, cfg.delta_t, cfg.strict, cfg.allow_negative)


def load_inputs(cfg):
    """(dataset, truth fast map or None) from a CSV or the synthetic generator."""
    if cfg.data:
        dataset, _ = read_csv(cfg.data, _ingest_config(cfg))
        truth = None
        if cfg.truth:
            tds, _ = read_csv(cfg.truth, _ingest_config(cfg))
            truth = dict(tds.fast)
        return dataset, truth
    spec = cfg.synthetic_spec()
    if spec is None:
        raise ConfigError("no input: give --data or a synthetic spec in the config")
    return generate_synthetic(spec, cfg.seed)


def pick_target(cfg, dataset):
    if cfg.target:
        if cfg.target not in dataset.slow:
            raise DataError(f"target {cfg.target!r} has no slow series")
        return cfg.target
    meter_only = [n for n in sorted(dataset.slow) if n not in dataset.fast]
    if not meter_only:
        raise ConfigError("no smart-meter-only node found; set target")
    return meter_only[0]


def _truth_series(dataset, truth, target):
    if truth and target in truth:
        return truth[target]
    if target in dataset.fast:
        return dataset.fast[target]
    raise DataError(f"no ground truth for {target}: supply --truth")


class Prepared:
    """Everything the train/synthesize/evaluate steps share."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.dataset, self.truth = load_inputs(cfg)
        self.target = pick_target(cfg, self.dataset)
        self.exp = cfg.experiment(self.target)
        self.view = self.dataset.withhold(self.target)
        slow = self.view.slow[self.target]
        self.blocks = self.exp.split.windows(slow.start_index, slow.end_index)
        self.corr = correlation_matrix(self.view, windows=self.blocks["train"],
                                       min_support=self.exp.min_support)


def _model_dir(cfg, scale, node):
    return os.path.join(cfg.out, "models", f"{scale}-{node}")


def _save_models(p, models):
    cfg = p.cfg
    k0, k1 = p.blocks["train"]
    T = p.view.T
    items = []
    if models.slow is not None:
        items.append((SLOW, p.target, models.slow, p.view.slow[p.target].span(k0, k1)))
    for j, m in models.fast.items():
        items.append((FAST, j, m, p.view.fast[j].span(k0 * T, k1 * T)))
    for scale, node, model, values in items:
        extra = {"node_id": node, "scale": scale, "seed": cfg.seed, "train_windows": [k0, k1],
                 "data_fingerprint": fingerprint(values)}
        save_model(model, _model_dir(cfg, scale, node), extra)
        models.traces[(scale, node)].to_csv(_out(cfg, "traces", f"{scale}-{node}.csv"))


def _load_models(p):
    from .evaluation import TrainedModels

    models = TrainedModels()
    methods = set(p.exp.methods)
    if methods & {"CF-DGP", "PB"}:
        path = _model_dir(p.cfg, SLOW, p.target)
        if not os.path.isdir(path):
            raise DataError(f"missing model {path}: run train first")
        models.slow = load_model(path)
    if "CF-DGP" in methods:
        for j in select_neighbors(p.view, p.corr, p.target, p.exp.r_min):
            path = _model_dir(p.cfg, FAST, j)
            if not os.path.isdir(path):
                raise DataError(f"missing model {path}: run train first")
            models.fast[j] = load_model(path)
    return models


def _means(p):
    if "CF" not in p.exp.methods:
        return None
    return historical_means(p.view, select_neighbors(p.view, p.corr, p.target, p.exp.r_min),
                            p.target, p.blocks["train"])


def _synthesize(p, models):
    out = {}
    means = _means(p)
    for block in ("validate", "test"):
        k0, k1 = p.blocks[block]
        if k1 > k0:
            out[block] = synthesize(p.view, p.corr, p.exp, models, (k0, k1), means)
            write_pseudo_csv(list(out[block].values()), p.view, _out(p.cfg, f"pseudo_{block}.csv"))
    return out


def _evaluate(p, pseudo):
    truth = _truth_series(p.dataset, p.truth, p.target)
    T = p.view.T
    reports = {}
    for block, series in pseudo.items():
        k0, k1 = p.blocks[block]
        actual = truth.span(k0 * T, k1 * T)
        reports[block] = [score(s.method, s.mean, actual, s.window_index, p.exp.epsilon)
                          for s in series.values()]
        write_table_csv(reports[block], _out(p.cfg, f"comparison_{block}.csv"))
        _write_windows(reports[block], _out(p.cfg, f"windows_{block}.csv"))
    test = reports["test"]
    text = format_table(test)
    if "CF-DGP" in [r.method for r in test] and len(test) > 1:
        red = headline_reductions([(r.method, r.rmse, r.mape) for r in test])
        text += "\n\n" + format_reductions(red)
    with open(_out(p.cfg, "comparison.txt"), "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    return reports, text


def _write_windows(reports, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "window", "rmse_kw", "mape_pct"])
        for r in reports:
            for k, e, m in r.per_window:
                w.writerow([r.method, k, repr(e), repr(m)])


# -- commands ---------------------------------------------------------------------------

def cmd_ingest(args):
    cfg = _config(args, data=args.csv or None)
    if not cfg.data:
        raise ConfigError("ingest needs a CSV path")
    dataset, report = read_csv(cfg.data, _ingest_config(cfg))
    for line in report.summary_lines(dataset):
        print(line)
    print(f"total missing readings: {report.gap_count}")
    return 0


def cmd_gen_synthetic(args):
    cfg = _config(args)
    spec = cfg.synthetic_spec() or SyntheticSpec()
    dataset, truth, flags = generate_synthetic(spec, cfg.seed, return_flags=True)
    emit_csv(dataset, _out(cfg, "dataset.csv"))
    emit_csv(dataset, _out(cfg, "truth.csv"), fast=truth)
    with open(_out(cfg, "gross_errors.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "timestamp"])
        for node in sorted(flags):
            for t in np.flatnonzero(flags[node]):
                w.writerow([node, dataset.fast_timestamp(t).isoformat()])
    _write_config(cfg)
    n_err = sum(int(f.sum()) for f in flags.values())
    print(f"{len(dataset.nodes)} nodes, {len(dataset.fast)} with fast series, {n_err} gross errors")
    print(f"wrote {cfg.out}")
    return 0


def cmd_correlate(args):
    cfg = _config(args)
    dataset, _ = load_inputs(cfg)
    corr = correlation_matrix(dataset, min_support=cfg.min_support)
    corr.to_csv(_out(cfg, "correlation.csv"))
    corr.to_grid_csv(_out(cfg, "correlation_grid.csv"))
    plotting.plot_correlation(corr, _out(cfg, "correlation.svg"))
    _write_config(cfg)
    for (a, b), reason in sorted(corr.reasons.items()):
        if a <= b:
            print(f"unusable: {a} {b} ({reason.__name__})")
    print(f"wrote {cfg.out}")
    return 0


def cmd_train(args):
    cfg = _config(args)
    p = Prepared(cfg)
    models = train_models(p.view, p.corr, p.exp, p.blocks["train"], cfg.threads)
    _save_models(p, models)
    _write_config(cfg)
    for (scale, node), trace in sorted(models.traces.items()):
        print(f"{scale} {node}: ELBO {trace.elbo[0]:.2f} -> {trace.elbo[-1]:.2f}")
    return 0


def cmd_synthesize(args):
    cfg = _config(args)
    p = Prepared(cfg)
    pseudo = _synthesize(p, _load_models(p))
    _write_config(cfg)
    for block, series in pseudo.items():
        print(f"{block}: {', '.join(series)} for {p.target}, {len(next(iter(series.values())))} points")
    return 0


def cmd_evaluate(args):
    cfg = _config(args)
    if args.table:
        rows = read_table_csv(args.table)
        print(format_reductions(headline_reductions(rows, args.proposed), args.proposed))
        return 0
    p = Prepared(cfg)
    pseudo = {}
    for block in ("validate", "test"):
        path = os.path.join(cfg.out, f"pseudo_{block}.csv")
        if os.path.exists(path):
            pseudo[block] = {s.method: s for s in read_pseudo_csv(path, p.view) if s.node_id == p.target}
    if "test" not in pseudo:
        raise DataError(f"no pseudo series in {cfg.out}: run synthesize first")
    _, text = _evaluate(p, pseudo)
    print(text)
    return 0


def cmd_report(args):
    cfg = _config(args)
    p = Prepared(cfg)
    models = train_models(p.view, p.corr, p.exp, p.blocks["train"], cfg.threads)
    _save_models(p, models)
    pseudo = _synthesize(p, models)
    reports, text = _evaluate(p, pseudo)
    _write_config(cfg)
    _figures(p, models, pseudo, reports)
    print(text)
    return 0


def _figures(p, models, pseudo, reports):
    cfg, view, T, dt = p.cfg, p.view, p.view.T, p.view.delta_t
    p.corr.to_csv(_out(cfg, "correlation.csv"))
    plotting.plot_correlation(p.corr, _out(cfg, "figures", "correlation.svg"))
    plotting.plot_metrics(reports["test"], _out(cfg, "figures", "metrics.svg"))

    # one test day: truth against every method
    k0, k1 = p.blocks["test"]
    day = min(k1 - k0, view.windows_per_day)
    idx = np.arange(k0 * T, (k0 + day) * T)
    truth = _truth_series(p.dataset, p.truth, p.target).span(idx[0], idx[-1] + 1)
    lines = {"actual": truth}
    for m, s in pseudo["test"].items():
        lines[m] = s.mean[: idx.size]
    hours = idx * dt
    _series_csv(_out(cfg, "figures", "pseudo_day.csv"), hours, lines)
    plotting.plot_lines(hours, lines, _out(cfg, "figures", "pseudo_day.svg"),
                        title=f"Pseudo measurements for {p.target}",
                        styles={"actual": {"color": "0.2", "lw": 1.4}})

    if models.slow is not None:
        ks = np.arange(k0, k1)
        pred = models.slow.predict(ks, num_samples=p.exp.num_samples, seed=p.exp.seed)
        actual = view.slow[p.target].span(k0, k1)
        x = ks * T * dt
        _series_csv(_out(cfg, "figures", "slow_forecast.csv"), x,
                    {"actual": actual, "mean": pred.mean, "variance": pred.variance})
        plotting.plot_band(x, pred.mean, pred.variance, actual, _out(cfg, "figures", "slow_forecast.svg"),
                           title=f"Energy forecast for {p.target}", ylabel="energy (kWh)")
        plotting.plot_trace(models.traces[(SLOW, p.target)], _out(cfg, "figures", "trace_slow.svg"))
    for j, m in sorted(models.fast.items())[:1]:
        pred = m.predict(idx, num_samples=p.exp.num_samples, seed=p.exp.seed)
        actual = view.fast[j].span(idx[0], idx[-1] + 1)
        _series_csv(_out(cfg, "figures", f"fast_fit_{j}.csv"), hours,
                    {"actual": actual, "mean": pred.mean, "variance": pred.variance})
        plotting.plot_band(hours, pred.mean, pred.variance, actual, _out(cfg, "figures", f"fast_fit_{j}.svg"),
                           title=f"Fast model for {j}")


def _series_csv(path, x, cols):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hour"] + list(cols))
        for i, xv in enumerate(x):
            w.writerow([repr(float(xv))] + [repr(float(c[i])) for c in cols.values()])


# -- parser -------------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--threads", type=int, help="worker threads for model training")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="input CSV (timestamp,node_id,value,scale)")
    data.add_argument("--truth", help="CSV holding the target's true fast series")
    data.add_argument("--target", help="node whose fast series is estimated")
    data.add_argument("--reference", choices=["window_end", "window_mean"])

    parser = argparse.ArgumentParser(prog="cfdgp", description="Fast pseudo-measurements from slow meter data.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("ingest", parents=[common], help="parse a CSV and print a summary")
    p.add_argument("csv", nargs="?")
    p.set_defaults(func=cmd_ingest)
    p = sub.add_parser("gen-synthetic", parents=[common], help="write a synthetic dataset")
    p.set_defaults(func=cmd_gen_synthetic)
    p = sub.add_parser("correlate", parents=[common, data], help="correlation matrix of slow energy")
    p.set_defaults(func=cmd_correlate)
    p = sub.add_parser("train", parents=[common, data], help="train and store the models")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("synthesize", parents=[common, data], help="pseudo series from stored models")
    p.set_defaults(func=cmd_synthesize)
    p = sub.add_parser("evaluate", parents=[common, data], help="score pseudo series or a table")
    p.add_argument("--table", help="CSV with method,rmse_kw,mape_pct rows; prints the reductions")
    p.add_argument("--proposed", default="CF-DGP")
    p.set_defaults(func=cmd_evaluate)
    p = sub.add_parser("report", parents=[common, data], help="train, synthesize, evaluate and plot")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CfdgpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
