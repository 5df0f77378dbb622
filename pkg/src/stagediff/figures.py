"""Static figure rendering: per-step trajectory strips and metrics plots.

Everything is written to file through the Agg backend; no display is needed.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .chem import BOND_NONE, MolGraph, Tag

_TAG_COLOR = {int(Tag.PRODUCT): "#4878cf", int(Tag.GROUP): "#e1812c", int(Tag.DUMMY): "#bbbbbb"}
_BOND_STYLE = {1: 1.2, 2: 2.6, 3: 4.0}


def _layout(n: int) -> np.ndarray:
    """Deterministic circular layout; stable across steps of one trace."""
    theta = 2.0 * np.pi * np.arange(n) / max(n, 1)
    return np.column_stack([np.cos(theta), np.sin(theta)])


def _draw_graph(ax, g: MolGraph, pos: np.ndarray) -> None:
    for i, j, c in g.bonds():
        ax.plot([pos[i, 0], pos[j, 0]], [pos[i, 1], pos[j, 1]],
                color="#555555", linewidth=_BOND_STYLE.get(c, 1.2), zorder=1)
    dummy = g.node_cat == 0
    colors = [
        "#ffffff" if dummy[i] else _TAG_COLOR[int(g.node_tag[i])]
        for i in range(g.n)
    ]
    ax.scatter(pos[:, 0], pos[:, 1], s=160, c=colors, edgecolors="#333333",
               linewidths=0.8, zorder=2)
    for i in range(g.n):
        label = g.symbol(i)
        ax.text(pos[i, 0], pos[i, 1], label if label != "*" else "",
                ha="center", va="center", fontsize=7, zorder=3)
    ax.set_xlim(-1.4, 1.4)
    ax.set_ylim(-1.4, 1.4)
    ax.set_aspect("equal")
    ax.axis("off")


def render_trace_strip(trace, path, stride: int = 1) -> None:
    """One panel per recorded step: atoms as circles, bonds as lines.

    ``stride`` subsamples long trajectories; the final step is always shown.
    """
    steps = trace.steps
    if not steps:
        raise ValueError("the trace holds no recorded steps")
    picks = list(range(0, len(steps), max(1, stride)))
    if picks[-1] != len(steps) - 1:
        picks.append(len(steps) - 1)
    n_panels = len(picks)
    pos = _layout(steps[0][2].n)
    fig, axes = plt.subplots(1, n_panels, figsize=(1.6 * n_panels, 1.9))
    if n_panels == 1:
        axes = [axes]
    for ax, k in zip(axes, picks):
        stage, t, g = steps[k]
        _draw_graph(ax, g, pos)
        ax.set_title(f"{stage} t={t}", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def render_metrics(report, scores: list[float], path) -> None:
    """Accuracy/validity bars per k plus a candidate-score histogram."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.2))
    ks = list(report.k_list)
    x = np.arange(len(ks))
    width = 0.38
    ax1.bar(x - width / 2, [report.top_k_accuracy[k] for k in ks], width,
            label="accuracy", color="#4878cf")
    ax1.bar(x + width / 2, [report.top_k_validity[k] for k in ks], width,
            label="validity", color="#e1812c")
    ax1.set_xticks(x, [f"top-{k}" for k in ks])
    ax1.set_ylim(0.0, 1.05)
    ax1.legend(frameon=False, fontsize=8)
    ax1.set_title("ranked metrics", fontsize=9)

    if scores:
        ax2.hist(scores, bins=min(30, max(5, len(scores) // 4)), color="#6a9f58")
    ax2.set_title("candidate scores", fontsize=9)
    ax2.set_xlabel("score (lower is better)", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def render_loss_curve(log_rows, path) -> None:
    """Training cross-entropy per logged step, one line per term."""
    if not log_rows:
        raise ValueError("no training log rows to plot")
    steps = [r[0] for r in log_rows]
    atom = [r[2] for r in log_rows]
    bond = [r[3] for r in log_rows]
    fig, ax = plt.subplots(figsize=(6.0, 3.0))
    ax.plot(steps, atom, label="atom ce", color="#4878cf")
    ax.plot(steps, bond, label="bond ce", color="#e1812c")
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
