"""Report figures rendered to files (non-interactive backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes stable between runs
_SAVE = dict(dpi=100, metadata={"Software": None})


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def plot_predictions(report, path):
    """Estimate versus ground truth, one panel per regressed feature."""
    k = len(report.features)
    fig, axes = plt.subplots(1, k, figsize=(4 * k, 4), squeeze=False)
    for ax, j, name in zip(axes[0], range(k), report.features):
        t, e = report.truth[:, j], report.predictions[:, j]
        ax.plot(t, e, ".", ms=3)
        lo, hi = min(t.min(), e.min()), max(t.max(), e.max())
        ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
        ax.set_xlabel(f"{name} (true)")
        ax.set_ylabel(f"{name} (estimated)")
        ax.set_title(f"{report.relative[j]:.2f} %")
    _save(fig, path)


def plot_loss(history, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy([h.epoch for h in history], [h.loss for h in history], "o-", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    _save(fig, path)


def plot_confusion(report, path):
    fig, ax = plt.subplots(figsize=(4, 4))
    m = report.confusion
    ax.imshow(m, cmap="Blues")
    for (i, j), v in np.ndenumerate(m):
        ax.text(j, i, str(v), ha="center", va="center")
    ax.set_xticks(range(len(report.classes)), report.classes)
    ax.set_yticks(range(len(report.classes)), report.classes)
    ax.set_xlabel("estimated")
    ax.set_ylabel("true")
    ax.set_title(f"accuracy {report.accuracy:.3f}")
    _save(fig, path)


def plot_series(rows, x, path, xlabel=None, features=("depth", "position", "temperature"),
                logx=False):
    """Relative error of each feature against column ``x`` of a result table."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = [float(r[x]) for r in rows]
    for f in features:
        key = f"{f}_rel_pct"
        if key in rows[0]:
            ax.plot(xs, [float(r[key]) for r in rows], "o-", label=f)
    if logx:
        ax.set_xscale("log")
    ax.set_xlabel(xlabel or x)
    ax.set_ylabel("relative error (%)")
    ax.legend()
    _save(fig, path)


def plot_comparison(rows, path, features=("depth", "position", "temperature")):
    means = [r for r in rows if r.get("seed") == "mean"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    width = 0.8 / max(1, len(means))
    idx = np.arange(len(features))
    for i, r in enumerate(means):
        ax.bar(idx + i * width, [r[f"{f}_rel_pct"] for f in features], width, label=r["model"])
    ax.set_xticks(idx + width * (len(means) - 1) / 2, features)
    ax.set_ylabel("relative error (%)")
    ax.legend()
    _save(fig, path)


def save_image(values, path, title=None):
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(values, cmap="gray")
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    _save(fig, path)
