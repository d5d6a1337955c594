"""PNG renderings of the analysis tables (headless matplotlib)."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path: str) -> None:
    fig.tight_layout()
    # fixed metadata keeps re-rendered files byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def line_plot(path: str, x: Sequence[float], series: dict[str, Sequence[float]], xlabel: str,
              ylabel: str, title: str, secondary: dict[str, Sequence[float]] | None = None,
              secondary_label: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, ys in series.items():
        ax.plot(x, ys, marker="o", markersize=3, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    handles, labels = ax.get_legend_handles_labels()
    if secondary:
        ax2 = ax.twinx()
        for name, ys in secondary.items():
            ax2.plot(x, ys, marker="s", markersize=3, linestyle="--", color="tab:red", label=name)
        ax2.set_ylabel(secondary_label)
        h2, l2 = ax2.get_legend_handles_labels()
        handles, labels = handles + h2, labels + l2
    if labels:
        ax.legend(handles, labels, loc="best", fontsize=8)
    _save(fig, path)


def bar_plot(path: str, labels: Sequence[str], values: Sequence[float], xlabel: str, ylabel: str,
             title: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(values)), values, tick_label=list(labels))
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    _save(fig, path)
