"""Figure rendering for the CLI report paths.

Every command that writes delimited output also renders a small
matplotlib figure next to it. All functions take pre-aggregated data
and a target path; nothing here touches model state.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_training_curves(history: list[dict], path) -> None:
    """Validation BLEU per task over epochs, plus the mean."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    tasks = sorted({r["task"] for r in history
                    if r["split"] == "valid" and r["task"] != "mean"})
    for task in tasks:
        pts = [(r["epoch"], r["bleu"]) for r in history
               if r["split"] == "valid" and r["task"] == task]
        ax1.plot([p[0] for p in pts], [p[1] for p in pts], label=task, alpha=0.7)
    mean_pts = [(r["epoch"], r["bleu"]) for r in history
                if r["split"] == "valid" and r["task"] == "mean"]
    if mean_pts:
        ax1.plot([p[0] for p in mean_pts], [p[1] for p in mean_pts],
                 "k--", lw=2, label="mean")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("validation BLEU")
    ax1.legend(fontsize=7)

    train_pts = [(r["epoch"], r["loss"]) for r in history
                 if r["split"] == "train" and r["loss"] != ""]
    ax2.plot([p[0] for p in train_pts], [p[1] for p in train_pts], "C3")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("train loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_bleu_table(scores: dict[str, float], path, title: str = "test BLEU") -> None:
    """Per-task bar chart with the unweighted average appended."""
    names = list(scores)
    values = [scores[n] for n in names]
    names.append("Average")
    values.append(float(np.mean(values)) if values else 0.0)
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 4))
    bars = ax.bar(names, values, color=["C0"] * (len(names) - 1) + ["C1"])
    ax.bar_label(bars, fmt="%.1f", fontsize=8)
    ax.set_ylabel("BLEU")
    ax.set_title(title)
    plt.setp(ax.get_xticklabels(), rotation=30, ha="right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_recovery_curves(rows: list[dict], path) -> None:
    """Per-task BLEU against fine-tuning step after a merge."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    tasks = sorted({r["task"] for r in rows})
    for task in tasks:
        pts = [(r["step"], r["bleu"]) for r in rows if r["task"] == task]
        ax.plot([p[0] for p in pts], [p[1] for p in pts],
                marker="o", ms=3, label=task, alpha=0.8)
    ax.set_xlabel("fine-tuning step")
    ax.set_ylabel("test BLEU")
    ax.set_title("post-merge capability recovery")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_adapter_histogram(hist: np.ndarray, task_names: list[str], path) -> None:
    """Task-by-adapter assignment counts as a heatmap."""
    fig, ax = plt.subplots(figsize=(2 + 0.8 * hist.shape[1], 1.5 + 0.5 * hist.shape[0]))
    im = ax.imshow(hist, cmap="Blues", aspect="auto")
    ax.set_xticks(range(hist.shape[1]),
                  [f"adapter {i}" for i in range(hist.shape[1])])
    ax.set_yticks(range(len(task_names)), task_names)
    for i in range(hist.shape[0]):
        for j in range(hist.shape[1]):
            ax.text(j, i, str(int(hist[i, j])), ha="center", va="center", fontsize=8)
    fig.colorbar(im, ax=ax, shrink=0.8)
    ax.set_title("task-to-adapter assignments")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
