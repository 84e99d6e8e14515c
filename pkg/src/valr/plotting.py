"""Figures for reports. Uses the Agg backend; every function writes a PNG."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _style(ax):
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    ax.grid(axis="y", alpha=0.3)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def accuracy_bars(rows, columns, path, title="accuracy"):
    """Grouped bars: one group per column (family/bucket), one bar per row label.

    ``rows`` is ``[(label, {column: (mean, std)})]``.
    """
    fig, ax = plt.subplots(figsize=(max(5, 1.6 * len(columns)), 3.4))
    width = 0.8 / max(1, len(rows))
    x = np.arange(len(columns))
    for i, (label, cells) in enumerate(rows):
        means = [cells.get(c, (np.nan, 0))[0] for c in columns]
        errs = [cells.get(c, (0, 0))[1] or 0 for c in columns]
        ax.bar(x + (i - (len(rows) - 1) / 2) * width, means, width, yerr=errs, capsize=3, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels(columns, fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("accuracy")
    ax.set_title(title, fontsize=10)
    ax.legend(fontsize=8, frameon=False)
    _style(ax)
    _save(fig, path)


def bucket_bars(buckets: dict, path, title="accuracy by generated length"):
    """``buckets``: label -> {"accuracy": float|None, "n": int}."""
    labels = list(buckets)
    acc = [buckets[k]["accuracy"] if buckets[k]["accuracy"] is not None else 0.0 for k in labels]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    bars = ax.bar(labels, acc, color="#4c72b0")
    for b, k in zip(bars, labels):
        ax.annotate(f"n={buckets[k]['n']}", (b.get_x() + b.get_width() / 2, b.get_height()),
                    ha="center", va="bottom", fontsize=7)
    ax.set_ylim(0, 1.1)
    ax.set_xlabel("generated text tokens")
    ax.set_ylabel("accuracy")
    ax.set_title(title, fontsize=10)
    _style(ax)
    _save(fig, path)


def loss_curves(records, path, title="training"):
    """Plot ce / repa / total against step from a list of StepReport dicts."""
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    steps = [r["step"] for r in records]
    for key in ("ce", "total", "repa"):
        ys = [r.get(key) for r in records]
        if any(y is not None for y in ys):
            ax.plot(steps, [np.nan if y is None else y for y in ys], label=key, lw=1)
    ax.set_xlabel("step")
    ax.set_title(title, fontsize=10)
    ax.legend(fontsize=8, frameon=False)
    _style(ax)
    _save(fig, path)


def sweep_plot(axis: str, values, series: dict, path):
    """One line per metric in ``series`` (name -> list aligned with ``values``)."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    xs = np.arange(len(values))
    for name, ys in series.items():
        ax.plot(xs, [np.nan if y is None else y for y in ys], marker="o", label=name)
    ax.set_xticks(xs)
    ax.set_xticklabels([str(v) for v in values])
    ax.set_xlabel(axis)
    ax.legend(fontsize=8, frameon=False)
    _style(ax)
    _save(fig, path)
