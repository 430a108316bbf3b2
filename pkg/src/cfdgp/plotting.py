"""SVG figures for reports.  Written with a fixed hash salt and no date so
that reruns produce identical files."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "svg.hashsalt": "cfdgp",
    "svg.fonttype": "path",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.0,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_correlation(corr, path):
    """Heatmap of the coefficient matrix; unusable cells are left blank."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.2, 4.4))
        data = np.where(corr.usable, corr.r, np.nan)
        im = ax.imshow(data, vmin=-1, vmax=1, cmap="RdBu_r")
        ax.set_xticks(range(len(corr.nodes)), corr.nodes, rotation=90)
        ax.set_yticks(range(len(corr.nodes)), corr.nodes)
        fig.colorbar(im, ax=ax, label="Pearson r")
        ax.set_title("Correlation of slow energy")
        _save(fig, path)


def plot_lines(x, lines, path, title="", xlabel="hour", ylabel="power (kW)", styles=None):
    """One axis, several named series; ``styles`` maps names to plot kwargs."""
    styles = styles or {}
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(7.0, 3.2))
        for name, y in lines.items():
            ax.plot(x, y, label=name, **styles.get(name, {}))
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.legend(frameon=False, ncol=min(len(lines), 5), fontsize=8)
        _save(fig, path)


def plot_band(x, mean, var, actual, path, title="", xlabel="hour", ylabel="power (kW)"):
    """Predictive mean with a two-standard-deviation band against observations."""
    sd = np.sqrt(np.maximum(var, 0.0))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(7.0, 3.2))
        ax.fill_between(x, mean - 2 * sd, mean + 2 * sd, color="C0", alpha=0.2, lw=0)
        ax.plot(x, actual, color="0.3", lw=0.7, label="actual")
        ax.plot(x, mean, color="C0", label="prediction")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.legend(frameon=False, fontsize=8)
        _save(fig, path)


def plot_trace(trace, path, title="ELBO"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        ax.plot(trace.iteration, trace.elbo, color="0.7", lw=0.6)
        sm = trace.smoothed()
        ax.plot(np.asarray(trace.iteration)[len(trace.elbo) - len(sm):], sm, color="C0")
        ax.set_xlabel("iteration")
        ax.set_ylabel("ELBO")
        ax.set_title(title)
        _save(fig, path)


def plot_metrics(reports, path):
    """Side-by-side bars of RMSE and MAPE per method."""
    names = [r.method for r in reports]
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(7.0, 2.8))
        a.bar(names, [r.rmse for r in reports], color="C0")
        a.set_ylabel("RMSE (kW)")
        b.bar(names, [r.mape for r in reports], color="C1")
        b.set_ylabel("MAPE (%)")
        _save(fig, path)
