"""Matplotlib figures for the report command (file output only, Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIG_WIDTH = 3.4  # inches, one column
GOLDEN = (np.sqrt(5) - 1.0) / 2.0

STYLE = {
    "axes.labelsize": 8,
    "axes.titlesize": 8,
    "axes.linewidth": 0.6,
    "font.size": 8,
    "font.family": "sans-serif",
    "legend.fontsize": 7,
    "legend.frameon": False,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "lines.linewidth": 1.0,
    "lines.markersize": 4,
    "figure.dpi": 150,
    "savefig.dpi": 200,
    "savefig.bbox": "tight",
}


def _figure(height_ratio=GOLDEN):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(FIG_WIDTH, FIG_WIDTH * height_ratio))
    return fig, ax


def _save(fig, path):
    # Drop the "Software" tag so the PNG carries no matplotlib version string.
    with plt.rc_context(STYLE):
        fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def confusion_figure(matrix, path, title="classifier confusion (validation)"):
    """Row-normalized confusion heatmap with raw counts annotated."""
    m = np.asarray(matrix, dtype=float)
    k = len(m)
    rows = m.sum(axis=1, keepdims=True)
    norm = np.divide(m, rows, out=np.zeros_like(m), where=rows > 0)
    with plt.rc_context(STYLE):
        fig, ax = _figure(1.0)
        im = ax.imshow(norm, cmap="Blues", vmin=0.0, vmax=1.0)
        for i in range(k):
            for j in range(k):
                ax.text(j, i, f"{int(m[i, j])}", ha="center", va="center", fontsize=6,
                        color="white" if norm[i, j] > 0.6 else "black")
        ticks = np.arange(k)
        ax.set_xticks(ticks, [str(t + 1) for t in ticks])
        ax.set_yticks(ticks, [str(t + 1) for t in ticks])
        ax.set_xlabel("predicted scene")
        ax.set_ylabel("true scene")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04, label="row fraction")
    return _save(fig, path)


def sweep_figure(ks, ade, accuracy, path):
    """Routed ADE and classifier accuracy against the number of scenes."""
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        ax.plot(ks, ade, "o-", color="#08589e", label="routed ADE")
        ax.set_xlabel("number of scenes K")
        ax.set_ylabel("routed ADE (m)")
        ax2 = ax.twinx()
        ax2.plot(ks, np.asarray(accuracy) * 100.0, "s--", color="#d95f0e", label="classifier acc.")
        ax2.set_ylabel("validation accuracy (%)")
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [ln.get_label() for ln in lines], loc="best")
        ax.set_xticks(list(ks))
    return _save(fig, path)


def accuracy_latency_figure(names, cost, ade, path, highlight=None):
    """ADE against relative latency, one labelled point per method."""
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        for name, x, y in zip(names, cost, ade):
            special = name == highlight
            ax.scatter([x], [y], s=30 if special else 14, marker="*" if special else "o",
                       color="#d95f0e" if special else "#2b8cbe", zorder=3)
            ax.annotate(name, (x, y), textcoords="offset points", xytext=(3, 3), fontsize=6)
        ax.set_xlabel("relative latency (cost units)")
        ax.set_ylabel("test ADE (m)")
        ax.set_yscale("log")
    return _save(fig, path)


def scatter_figure(points, labels, path, title="scene features, first two principal components"):
    labels = np.asarray(labels)
    with plt.rc_context(STYLE):
        fig, ax = _figure(0.8)
        cmap = plt.get_cmap("tab10")
        for i, lab in enumerate(np.unique(labels)):
            m = labels == lab
            ax.scatter(points[m, 0], points[m, 1], s=3, alpha=0.6, color=cmap(i % 10),
                       label=f"scene {lab}", linewidths=0)
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
        ax.set_title(title)
        ax.legend(markerscale=3, loc="best")
    return _save(fig, path)
