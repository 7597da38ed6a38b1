"""Figures written next to the CSV outputs."""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _style(ax):
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.tick_params(labelsize=8)


def read_metrics(path):
    with open(path, encoding="utf-8") as f:
        lines = [line for line in f if not line.startswith("#")]
    return list(csv.DictReader(lines))


def plot_learning_curves(metrics_path, out_path):
    rows = read_metrics(metrics_path)
    n = [int(r["minibatch_n"]) for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    axes[0].plot(n, [float(r["loss_m"]) for r in rows], lw=0.8, label="mistranslation")
    axes[0].plot(n, [float(r["loss_e"]) for r in rows], lw=0.8, label="estimation")
    axes[0].set_yscale("log")
    axes[0].set_xlabel("minibatch")
    axes[0].legend(fontsize=7, frameon=False)
    axes[1].plot(n, [float(r["mean_read_lead"]) for r in rows], lw=0.8, color="C2")
    axes[1].set_xlabel("minibatch")
    axes[1].set_ylabel("mean read lead")
    ep = [(int(r["epoch"]), float(r["val_bleu"])) for r in rows if r["val_bleu"]]
    axes[2].plot([e for e, _ in ep], [b for _, b in ep], marker="o", ms=3, color="C3")
    axes[2].set_xlabel("epoch")
    axes[2].set_ylabel("validation BLEU")
    for ax in axes:
        _style(ax)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_trace(rows, out_path, title=None):
    """READ and WRITE counts per decision step."""
    fig, ax = plt.subplots(figsize=(5, 3))
    t = [r.t for r in rows]
    ax.plot(t, [r.reads for r in rows], label="READ", color="C0")
    ax.plot(t, [r.writes for r in rows], label="WRITE", color="C1")
    ax.set_xlabel("decision step")
    ax.set_ylabel("sequences")
    if title:
        ax.set_title(title, fontsize=9)
    ax.legend(fontsize=7, frameon=False)
    _style(ax)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
