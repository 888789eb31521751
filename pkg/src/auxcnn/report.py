"""Figure rendering for the report paths.

Every figure is derived from a delimited file that is always written first;
figures are a convenience view, never the only record. All rendering uses
the Agg backend and writes PNG files next to the CSVs.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

FIG_DPI = 130
_COLORS = ("#3465a4", "#cc4125", "#6aa84f", "#8e63ce", "#e69138", "#45818e")


def _new_axes(width=6.4, height=4.0):
    fig, ax = plt.subplots(figsize=(width, height))
    ax.grid(True, alpha=0.3, linewidth=0.6)
    return fig, ax


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=FIG_DPI, bbox_inches="tight")
    plt.close(fig)
    return path


def render_training_curves(log_csv, out_path):
    """Loss components per iteration plus the discriminator objective."""
    rows = []
    with open(log_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(row)
    if not rows:
        return None
    iters = [int(r["iter"]) for r in rows]
    fig, ax = _new_axes(7.0, 4.2)
    for i, key in enumerate(("L_cls", "L_rec", "L_adv", "L_cmb", "D_loss")):
        vals = [float(r[key]) for r in rows]
        if key != "L_cmb" and all(v == 0.0 for v in vals):
            continue  # component absent in this mode
        ax.plot(iters, vals, label=key, color=_COLORS[i % len(_COLORS)], linewidth=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    return _save(fig, out_path)


def render_roc(points, out_path, auc=None):
    """ROC curve from (fpr, tpr, threshold) triples."""
    fpr = [p[0] for p in points]
    tpr = [p[1] for p in points]
    fig, ax = _new_axes(4.6, 4.4)
    ax.plot([0, 1], [0, 1], linestyle="--", color="0.6", linewidth=0.8)
    label = f"AUC = {auc:.4f}" if auc is not None else None
    ax.plot(fpr, tpr, color=_COLORS[0], linewidth=1.4, label=label)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    if label:
        ax.legend(loc="lower right", fontsize=9)
    return _save(fig, out_path)


def render_mode_comparison(table, metrics, out_path):
    """Grouped bars with std error bars; ``table`` maps mode -> aggregate."""
    modes = list(table)
    if not modes:
        return None
    import numpy as np

    idx = np.arange(len(metrics), dtype=float)
    width = 0.8 / max(len(modes), 1)
    fig, ax = _new_axes(1.8 + 1.3 * len(metrics), 4.0)
    for i, mode in enumerate(modes):
        agg = table[mode]
        means = [agg.mean.get(m, 0.0) for m in metrics]
        stds = [agg.std.get(m, 0.0) for m in metrics]
        ax.bar(idx + i * width, means, width * 0.92, yerr=stds, capsize=3,
               label=mode, color=_COLORS[i % len(_COLORS)])
    ax.set_xticks(idx + width * (len(modes) - 1) / 2)
    ax.set_xticklabels([m.replace("macro_", "") for m in metrics], fontsize=9)
    ax.set_ylabel("score")
    lo = min(min(t.mean.get(m, 0.0) for m in metrics) for t in table.values())
    ax.set_ylim(max(0.0, lo - 0.1), 1.02)
    ax.legend(fontsize=8)
    return _save(fig, out_path)


def render_validation_curve(records, out_path):
    """Per-epoch validation accuracy and mean classification loss."""
    epochs = [r.epoch for r in records]
    fig, ax = _new_axes(6.2, 3.8)
    ax.plot(epochs, [r.val_accuracy for r in records], color=_COLORS[0],
            marker="o", markersize=3, linewidth=1.1, label="validation accuracy")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r.mean_l_cls for r in records], color=_COLORS[1],
             linewidth=1.1, label="epoch mean L_cls")
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy")
    ax2.set_ylabel("L_cls")
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], fontsize=8, loc="center right")
    return _save(fig, out_path)
