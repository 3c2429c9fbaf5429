"""Figure rendering for run and comparison reports (files only, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.7),
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.6,
    "savefig.dpi": 120,
}


def plot_eval_curve(points, path: Path | str, title: str = "", threshold: float | None = None) -> Path:
    """Step vs mean validation reward for a single run."""
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if points:
            xs, ys = zip(*points)
            ax.plot(xs, ys, marker="o", markersize=2.5)
        if threshold is not None:
            ax.axhline(threshold, color="0.5", linestyle="--", linewidth=1)
        ax.set_xlabel("training step")
        ax.set_ylabel("validation reward")
        ax.set_ylim(-0.03, 1.03)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_comparison(curves: dict[str, list[list[tuple[int, float]]]], path: Path | str,
                    threshold: float | None = None) -> Path:
    """One thin line per seed and a bold mean line per mode."""
    path = Path(path)
    colors = {"rl": "C0", "rl_no_buffer": "C1", "evo": "C2"}
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for mode, runs in curves.items():
            color = colors.get(mode, None)
            for pts in runs:
                if pts:
                    xs, ys = zip(*pts)
                    ax.plot(xs, ys, color=color, alpha=0.25, linewidth=0.8)
            mean = _mean_curve(runs)
            if mean:
                xs, ys = zip(*mean)
                ax.plot(xs, ys, color=color, label=mode)
        if threshold is not None:
            ax.axhline(threshold, color="0.5", linestyle="--", linewidth=1)
        ax.set_xlabel("training step")
        ax.set_ylabel("validation reward")
        ax.set_ylim(-0.03, 1.03)
        if curves:
            ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def _mean_curve(runs):
    # runs stop at different steps; carry each run's last value forward
    steps = sorted({s for pts in runs for s, _ in pts})
    out = []
    for s in steps:
        vals = []
        for pts in runs:
            past = [v for t, v in pts if t <= s]
            if past:
                vals.append(past[-1])
        if vals:
            out.append((s, sum(vals) / len(vals)))
    return out
