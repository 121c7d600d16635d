"""Render experiment figures from the same series written to the plot-data CSVs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .experiments import ResultTable, plot_data  # noqa: E402

LABELS = {
    "ts": "Thompson Sampling",
    "budgeted_ts": "Budgeted TS",
    "hte_greedy": "HTE Greedy",
    "bccb": "BCCB",
    "offline_uplift": "Offline Uplift",
}
COLORS = {
    "ts": "tab:blue",
    "budgeted_ts": "tab:orange",
    "hte_greedy": "tab:green",
    "bccb": "tab:purple",
    "offline_uplift": "tab:red",
}

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def _series(rows, x, y, err=None):
    by_policy = {}
    for r in rows:
        by_policy.setdefault(r["policy"], []).append(r)
    for policy, rs in by_policy.items():
        rs = sorted(rs, key=lambda r: r[x])
        xs = [r[x] for r in rs]
        ys = [r[y] if r[y] is not None else float("nan") for r in rs]
        es = [r[err] for r in rs] if err else None
        yield policy, xs, ys, es


def _line_panel(ax, rows, x, y, err, xlabel, ylabel, logx=False):
    for policy, xs, ys, es in _series(rows, x, y, err):
        ax.errorbar(
            xs, ys, yerr=es, marker="o", ms=4, capsize=2,
            label=LABELS.get(policy, policy), color=COLORS.get(policy),
        )
    if logx:
        ax.set_xscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(frameon=False)


def render_figures(table: ResultTable, out_dir: str | Path) -> dict[str, Path]:
    """Write PNG figures next to the CSVs; returns {name: path}."""
    out = Path(out_dir)
    data = plot_data(table)
    written = {}
    with plt.rc_context(STYLE):
        if table.experiment == "budget_sweep":
            fig, ax = plt.subplots(figsize=(4.5, 3.2))
            _line_panel(ax, data["figure1a_conversions_vs_budget.csv"], "budget", "conversions_mean",
                        "conversions_std", "Budget ($)", "Conversions")
            written["figure1a"] = out / "figure1a_conversions_vs_budget.png"
        elif table.experiment == "scale":
            fig, ax = plt.subplots(figsize=(4.5, 3.2))
            _line_panel(ax, data["figure1b_conversions_vs_scale.csv"], "users", "conversions_mean",
                        "conversions_std", "Users streamed", "Conversions", logx=True)
            written["figure1b"] = out / "figure1b_conversions_vs_scale.png"
        elif table.experiment == "crossover":
            fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.2))
            _line_panel(a, data["figure2a_crossover.csv"], "train_size", "conversions_mean",
                        "conversions_std", "Offline training size", "Conversions", logx=True)
            _line_panel(b, data["figure2b_cov.csv"], "train_size", "conversions_cov", None,
                        "Offline training size", "Coefficient of variation", logx=True)
            written["figure2"] = out / "figure2_crossover.png"
        else:
            return {}
        fig.tight_layout()
        for path in written.values():
            fig.savefig(path)
        plt.close(fig)
    return written
