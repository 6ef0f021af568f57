"""Render report figures to PNG next to the CSVs they are drawn from."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

BEFORE, AFTER = "tab:blue", "tab:orange"

plt.rcParams.update({
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
})


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def learning_curve(curve, path):
    rows = curve.rows
    epochs = [r["epoch"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    axes[0].plot(epochs, [r["train_loss"] for r in rows], label="train")
    axes[0].plot(epochs, [r["valid_loss"] for r in rows], label="valid")
    frozen = [e for e, r in zip(epochs, rows) if r["frozen_flag"]]
    if frozen and len(frozen) < len(epochs):
        axes[0].axvspan(min(frozen) - 0.5, max(frozen) + 0.5, color="0.9", zorder=0)
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("cosine loss")
    axes[0].legend()
    axes[1].plot(epochs, [r["valid_cs"] for r in rows], color="k")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("validation CS")
    return _save(fig, path)


def filter_drift(report, path):
    """Δf bars for cfo; per-kernel spectra before/after otherwise."""
    if report.mode == "cfo":
        f0 = np.array([r["f_init"] for r in report.rows])
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.bar(f0, report.delta_f, width=6)
        ax.axhline(0, color="k", lw=0.8)
        ax.set_xlabel("initial central frequency (Hz)")
        ax.set_ylabel("Δf (Hz)")
        return _save(fig, path)
    n = len(report.spectra_before)
    cols = 6
    rows = int(np.ceil(n / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(2 * cols, 1.5 * rows), sharex=True)
    for j, ax in enumerate(np.ravel(axes)):
        if j >= n:
            ax.axis("off")
            continue
        ax.plot(report.spectrum_freqs, report.spectra_before[j] ** 2, color=BEFORE, lw=0.8)
        ax.plot(report.spectrum_freqs, report.spectra_after[j] ** 2, color=AFTER, lw=0.8)
        r = report.rows[j]
        ax.set_title(f"{r['peak_init']:.0f} -> {r['peak_final']:.0f} Hz", fontsize=7)
        ax.set_yticks([])
    return _save(fig, path)


def size_sweep(curves: dict, path, ylabel="CS difference"):
    """``curves`` maps a label to a :func:`~ecogdec.experiments.difference_curve` dict."""
    fig, ax = plt.subplots(figsize=(5, 3))
    for label, c in curves.items():
        line, = ax.plot(c["settings"], c["mean"], alpha=0.4, lw=0.8)
        ax.plot(c["settings"], c["moving_average"], color=line.get_color(), lw=2, label=label)
    ax.axhline(0, color="k", lw=0.8)
    ax.set_xlabel("training sessions")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=7)
    return _save(fig, path)


def noise_sweep(results_by_label: dict, path):
    fig, ax = plt.subplots(figsize=(5, 3))
    for label, results in results_by_label.items():
        x = [r.setting for r in results]
        ax.errorbar(x, [r.mean for r in results], yerr=[r.std for r in results], label=label, capsize=2)
    ax.set_xlabel("noise level (fraction of shuffled targets)")
    ax.set_ylabel("test CS")
    ax.legend(fontsize=7)
    return _save(fig, path)
