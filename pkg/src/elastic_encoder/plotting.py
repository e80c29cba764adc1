"""Figures written next to benchmark and training outputs."""

from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_throughput(table: list[dict], path) -> None:
    """Samples/s and speedup per granularity, one line per swept axis."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    series = defaultdict(list)
    for t in table:
        if t["f_mlp"] == 1.0:
            series["heads"].append((t["f_head"], t))
        if t["f_head"] == 1.0:
            series["mlp"].append((t["f_mlp"], t))
    for axis, pts in series.items():
        if len(pts) < 2:
            continue
        pts.sort(key=lambda p: p[0])
        xs = [100 * f for f, _ in pts]
        ax1.plot(xs, [t["samples_per_s"] for _, t in pts], "o-", label=axis)
        ax2.plot(xs, [t["speedup"] for _, t in pts], "o-", label=axis)
    ref = sorted((t["f_head"], t["reference_speedup"]) for t in table if t["reference_speedup"] is not None and t["f_mlp"] == 1.0)
    if ref:
        ax2.plot([100 * f for f, _ in ref], [s for _, s in ref], "k--", lw=1, label="reference (308M, H100)")
    ax1.set_xlabel("kept fraction (%)")
    ax1.set_ylabel("samples / s")
    ax2.set_xlabel("kept fraction (%)")
    ax2.set_ylabel("speedup vs 100%")
    seq = table[0]["seq_len"] if table else 0
    fig.suptitle(f"inference throughput, seq_len={seq}")
    for ax in (ax1, ax2):
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_training(records: list[dict], path) -> None:
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    tokens = [r["tokens"] for r in records]
    ax1.plot(tokens, [r["loss"] for r in records], lw=0.8)
    ax1.set_ylabel("mlm loss")
    ax2.plot(tokens, [r["lr"] for r in records])
    ax2.set_ylabel("learning rate")
    ax2.set_xlabel("tokens seen")
    for ax in (ax1, ax2):
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
