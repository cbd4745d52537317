"""Report figures. Everything renders off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

TRAINING_CURVES = ("L_d", "L_RE", "L_image", "L_adv", "L_disc", "L_w")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training(history: Sequence, path, keys: Sequence[str] = TRAINING_CURVES) -> Path:
    """Loss curves, one panel per term, from a list of LossBreakdown or dicts."""
    rows = [h if isinstance(h, dict) else h.to_dict() for h in history]
    fig, axes = plt.subplots(2, (len(keys) + 1) // 2, figsize=(4 * ((len(keys) + 1) // 2), 6), squeeze=False)
    steps = range(1, len(rows) + 1)
    for ax, key in zip(axes.flat, keys):
        ax.plot(steps, [float(r[key]) for r in rows], lw=0.8)
        ax.set_title(key)
        ax.set_xlabel("step")
    return _save(fig, path)


def plot_bra_bars(tables: Sequence, path, threshold: float = 0.75) -> Path:
    """Mean BRA per transform with the detection threshold as a dashed line."""
    labels = [t.transform for t in tables]
    values = [t.mean_bra if t.mean_bra is not None else 0.0 for t in tables]
    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(labels) + 2), 4))
    ax.bar(range(len(labels)), values, color="tab:blue")
    ax.axhline(100 * threshold, ls="--", color="tab:red", lw=1)
    ax.axhline(50, ls=":", color="grey", lw=1)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
    ax.set_ylim(0, 100)
    ax.set_ylabel("BRA (%)")
    return _save(fig, path)


def plot_attack_summary(summary: dict, path) -> Path:
    """Post-attack BRA per attack, ``summary`` mapping label to mean BRA."""
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = list(summary)
    ax.bar(range(len(labels)), [summary[k] for k in labels], color="tab:orange")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0, 100)
    ax.set_ylabel("mean BRA (%)")
    return _save(fig, path)
