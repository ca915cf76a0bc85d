"""Matplotlib figures written next to the CSV reports.

All figures go through :func:`_figure` / :func:`_save`, which pin the
backend, style and PNG metadata so reruns produce identical files.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _figure(width=6.0, height=3.6):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_rounds(history: Sequence[Mapping], path: str | Path) -> Path | None:
    """Mean test accuracy per federated round, one line per paradigm."""
    series: dict[str, list[tuple[int, float]]] = {}
    for rec in history:
        if "round" in rec and rec.get("mean_accuracy") is not None:
            series.setdefault(rec.get("paradigm", "federated"), []).append((rec["round"], rec["mean_accuracy"]))
    if not series:
        return None
    fig, ax = _figure()
    for name, points in series.items():
        xs, ys = zip(*points)
        ax.plot(xs, ys, marker="o", ms=3, label=name)
    ax.set_xlabel("communication round")
    ax.set_ylabel("mean accuracy")
    ax.set_ylim(0, 1)
    ax.legend(loc="lower right")
    return _save(fig, path)


def plot_ablation(rows: Sequence[Mapping], language: str, path: str | Path) -> Path:
    rows = sorted(rows, key=lambda r: r["size"])
    sizes = [r["size"] for r in rows]
    fig, ax = _figure()
    ax.plot(sizes, [r["monolingual_accuracy"] for r in rows], marker="s", label="monolingual")
    ax.plot(sizes, [r["federated_accuracy"] for r in rows], marker="o", label="federated")
    if min(sizes) > 0:
        ax.set_xscale("log")
    ax.set_xlabel(f"{language} training examples")
    ax.set_ylabel(f"{language} accuracy")
    ax.set_ylim(0, 1)
    ax.legend(loc="lower right")
    return _save(fig, path)


def plot_distance(rows: Sequence, path: str | Path) -> Path:
    """Horizontal bars of the distance per language (undefined ones hatched at zero)."""
    fig, ax = _figure(height=max(2.0, 0.35 * len(rows) + 1.0))
    labels = [r.language for r in rows][::-1]
    values = [r.phi if r.phi is not None else 0.0 for r in rows][::-1]
    bars = ax.barh(labels, values, color="tab:blue")
    for bar, r in zip(bars, rows[::-1]):
        if r.phi is None:
            bar.set_hatch("//")
            ax.annotate("undefined", (0, bar.get_y() + bar.get_height() / 2), va="center", fontsize=8)
    ax.set_xlabel("distance to pretraining mix (-ln cos)")
    return _save(fig, path)


def plot_partition(counts: Mapping[int, Mapping[str, int]], languages: Sequence[str],
                   path: str | Path) -> Path:
    """Stacked bars of language composition per client."""
    fig, ax = _figure()
    clients = sorted(counts)
    bottom = [0] * len(clients)
    for lang in languages:
        heights = [counts[c].get(lang, 0) for c in clients]
        ax.bar([str(c) for c in clients], heights, bottom=bottom, label=lang)
        bottom = [b + h for b, h in zip(bottom, heights)]
    ax.set_xlabel("client")
    ax.set_ylabel("examples")
    ax.set_ylim(0, 1.2 * max(bottom, default=1) or 1)  # headroom for the legend row
    ax.legend(loc="upper right", ncol=min(len(languages), 5))
    return _save(fig, path)
