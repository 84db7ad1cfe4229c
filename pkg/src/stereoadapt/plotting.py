"""PNG figures written next to the CSV/JSON outputs (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_loss_curve(rows: Sequence[dict], path, title: str = "training loss") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if rows:
        ax.plot([r["iter"] for r in rows], [r["loss"] for r in rows], lw=1)
        ax.set_yscale("log")
        lr_ax = ax.twinx()
        lr_ax.plot([r["iter"] for r in rows], [r["lr"] for r in rows], color="tab:orange", lw=0.8, alpha=0.7)
        lr_ax.set_ylabel("lr", color="tab:orange")
    ax.set_xlabel("iteration")
    ax.set_ylabel("L1 loss")
    ax.set_title(title)
    return _save(fig, path)


def plot_per_image(report, path) -> Path:
    """Per-pair PSNR of each view, one panel per dataset."""
    names = list(report.datasets)
    fig, axes = plt.subplots(1, len(names), figsize=(4 * len(names), 3.2), squeeze=False)
    for ax, name in zip(axes[0], names):
        pairs = report.datasets[name].pairs
        xs = range(len(pairs))
        ax.bar([x - 0.2 for x in xs], [p.psnr_left for p in pairs], width=0.4, label="left")
        ax.bar([x + 0.2 for x in xs], [p.psnr_right for p in pairs], width=0.4, label="right")
        ax.set_xticks(list(xs), [p.id for p in pairs], rotation=60, fontsize=7)
        ax.set_ylabel("PSNR (dB)")
        ax.set_title(f"{name}: {report.datasets[name].psnr:.2f} dB")
        lo = min([min(p.psnr_left, p.psnr_right) for p in pairs], default=0.0)
        ax.set_ylim(max(0.0, lo - 2.0), None)
    axes[0][0].legend(fontsize=7)
    return _save(fig, path)


def plot_ablation(rows: Sequence[dict], path) -> Path:
    """PSNR gain over the frozen backbone for each run, annotated with trainable params."""
    fig, ax = plt.subplots(figsize=(7, 3.8))
    labels = [r["run"] for r in rows]
    gains = [r["psnr_gain"] for r in rows]
    colors = ["tab:gray" if r["group"] == "baseline" else "tab:blue" if r["group"] == "modes" else "tab:green"
              for r in rows]
    bars = ax.bar(range(len(rows)), gains, color=colors)
    for bar, r in zip(bars, rows):
        ax.annotate(f"{r['params_trainable']:,}", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom" if bar.get_height() >= 0 else "top", fontsize=7)
    ax.axhline(0.0, color="black", lw=0.8)
    ax.set_xticks(range(len(rows)), labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("PSNR gain vs frozen (dB)")
    ax.set_title("fine-tuning regimes and stereo adapter count")
    return _save(fig, path)
