"""Static figures for sweeps and reports: success rate against guidance weight or 1/beta."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

golden_mean = (np.sqrt(5) - 1.0) / 2.0
fig_width = 4.5
colors = ["#08589e", "#e6550d", "#31a354", "#756bb1", "#636363", "#de2d26", "#3182bd", "#fdae6b"]

params = {
    "axes.prop_cycle": matplotlib.cycler(color=colors),
    "axes.labelsize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "lines.linewidth": 1.5,
    "lines.markersize": 4,
    "figure.figsize": [fig_width, fig_width * golden_mean],
    # reproducible SVG ids
    "svg.hashsalt": "cfgrl",
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = path.suffix.lstrip(".") or "svg"
    meta = {"Date": None} if fmt == "svg" else None
    fig.savefig(path, format=fmt, metadata=meta, bbox_inches="tight")
    plt.close(fig)


def success_curves(rows):
    """{method: (xs, means, stds)} over seeds from sweep rows."""
    by = defaultdict(lambda: defaultdict(list))
    for r in rows:
        by[r["method"]][float(r["w_or_beta"])].append(float(r["success_rate"]))
    out = {}
    for method, pts in by.items():
        xs = sorted(pts)
        out[method] = (np.array(xs), np.array([np.mean(pts[x]) for x in xs]), np.array([np.std(pts[x]) for x in xs]))
    return out


def plot_sweep(rows, path, title: str | None = None) -> None:
    """Success vs w (flow methods) or 1/beta (AWR) per method, seed spread shaded.

    Both axes share only their origin, where each method reduces to behavioral cloning.
    """
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        for method, (xs, mean, std) in sorted(success_curves(rows).items()):
            style = "o-" if len(xs) > 1 else "s"
            ax.plot(xs, mean, style, label=method)
            if len(xs) > 1:
                ax.fill_between(xs, np.clip(mean - std, 0, 1), np.clip(mean + std, 0, 1), alpha=0.15)
        ax.set_xlabel("guidance weight w  /  inverse temperature 1/beta")
        ax.set_ylabel("success rate")
        ax.set_ylim(-0.02, 1.02)
        if title:
            ax.set_title(title)
        ax.legend(loc="best")
        _save(fig, path)


def plot_blocks(blocks: dict, path) -> None:
    """One panel per report block."""
    names = list(blocks)
    with plt.rc_context(params):
        fig, axes = plt.subplots(1, len(names), figsize=(fig_width * len(names), fig_width * golden_mean), squeeze=False)
        for ax, name in zip(axes[0], names):
            for method, (xs, mean, std) in sorted(success_curves(blocks[name]).items()):
                ax.errorbar(xs, mean, yerr=std, fmt="o-" if len(xs) > 1 else "s", capsize=2, label=method)
            ax.set_title(name)
            ax.set_xlabel("w  /  1/beta")
            ax.set_ylim(-0.02, 1.02)
        axes[0][0].set_ylabel("success rate")
        axes[0][-1].legend(loc="best")
        _save(fig, path)
