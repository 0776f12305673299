"""Figures written next to the tab-separated outputs of the CLI."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}

SCALE_COLORS = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a"]


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def read_metric_log(path) -> np.ndarray:
    """Rows of ``iteration lr total loss0..loss3`` from a ``metrics.tsv``."""
    rows = [line.split("\t") for line in Path(path).read_text().splitlines() if line and not line.startswith("#")]
    return np.array(rows, dtype=np.float64).reshape(-1, 7)


def loss_curve(log: np.ndarray, path) -> Path:
    with plt.rc_context(_STYLE):
        fig, (ax, ax_lr) = plt.subplots(2, 1, figsize=(5.0, 4.2), sharex=True,
                                        gridspec_kw={"height_ratios": [3, 1]})
        it = log[:, 0]
        ax.plot(it, log[:, 2], color="k", lw=1.4, label="total")
        for i in range(4):
            ax.plot(it, log[:, 3 + i], color=SCALE_COLORS[i], lw=0.9, label=f"P{i}")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend(ncol=5, frameon=False, loc="upper right")
        ax_lr.plot(it, log[:, 1], color="0.4", lw=1.0)
        ax_lr.set_ylabel("lr")
        ax_lr.set_xlabel("iteration")
        return _save(fig, path)


def metric_summary(names, iou, fbeta, mae, path) -> Path:
    """Per-image metric distributions with the means marked."""
    iou, fbeta, mae = (np.asarray(v, dtype=np.float64) for v in (iou, fbeta, mae))
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(8.0, 2.6), sharey=True)
        for ax, values, label in zip(axes, (iou, fbeta, mae), ("IoU", r"$F_\beta$", "MAE")):
            ax.hist(values, bins=np.linspace(0, 1, 21), color="0.7", edgecolor="0.3", lw=0.5)
            ax.axvline(values.mean(), color="#d95f02", lw=1.2)
            ax.set_xlabel(f"{label} (mean {values.mean():.3f})")
            ax.set_xlim(0, 1)
        axes[0].set_ylabel(f"images (n={len(names)})")
        return _save(fig, path)


def attention_panel(image: np.ndarray, maps, query_rect, feature_shape, path, titles=None) -> Path:
    """Input image with the query region outlined, then one column per map."""
    h, w = feature_shape
    H, W = image.shape[:2]
    titles = titles or [f"map {i}" for i in range(len(maps))]
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, 1 + len(maps), figsize=(2.4 * (1 + len(maps)), 2.6))
        axes[0].imshow(np.clip(image, 0, 1), interpolation="nearest")
        y0, x0, y1, x1 = query_rect
        sy, sx = H / h, W / w
        axes[0].add_patch(plt.Rectangle((x0 * sx - 0.5, y0 * sy - 0.5), (x1 - x0) * sx, (y1 - y0) * sy,
                                        fill=False, ec="#e7298a", lw=1.5))
        axes[0].set_title("query")
        for ax, m, title in zip(axes[1:], maps, titles):
            ax.imshow(m, cmap="magma", vmin=0, vmax=1, interpolation="nearest")
            ax.set_title(title)
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
        return _save(fig, path)


def prediction_panel(image: np.ndarray, prob: np.ndarray, path) -> Path:
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(5.0, 2.6))
        axes[0].imshow(np.clip(image, 0, 1), interpolation="nearest")
        axes[0].set_title("input")
        axes[1].imshow(prob, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
        if prob.min() < 0.5 < prob.max():
            axes[1].contour(prob, levels=[0.5], colors="#d95f02", linewidths=1.0)
        axes[1].set_title("mirror probability")
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
        return _save(fig, path)
