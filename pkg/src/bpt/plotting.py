"""Figures written next to the TSV reports. Rendering is headless (Agg)."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
from matplotlib import pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _figsize(width: float = 6.0) -> tuple[float, float]:
    golden = (math.sqrt(5.0) - 1.0) / 2.0
    return width, width * golden


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_bench(rows, path: str | Path) -> Path:
    """Two panels against sequence length: edge counts and forward throughput."""
    with plt.rc_context(STYLE):
        fig, (ax_e, ax_t) = plt.subplots(1, 2, figsize=_figsize(8.0))
        x = [r.length for r in rows]
        ax_e.loglog(x, [r.edges for r in rows], "o-", base=2, label="BPT edges")
        ax_e.loglog(x, [r.dense_edges for r in rows], "s--", base=2, label="dense $n^2$")
        ax_e.set_xlabel("sequence length")
        ax_e.set_ylabel("edges")
        ax_e.legend()
        drawn = False
        for attr, style, label in (("sparse_tok_s", "o-", "BPT"), ("dense_tok_s", "s--", "dense")):
            pts = [(r.length, getattr(r, attr)) for r in rows if getattr(r, attr) is not None]
            if pts:
                ax_t.semilogx(*zip(*pts), style, base=2, label=label)
                drawn = True
        ax_t.set_xlabel("sequence length")
        ax_t.set_ylabel("tokens / s (forward)")
        if drawn:
            ax_t.legend()
        else:
            ax_t.text(0.5, 0.5, "not timed", ha="center", va="center", transform=ax_t.transAxes)
        fig.tight_layout()
        return _save(fig, path)


def plot_metrics(records, task: str, path: str | Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=_figsize())
        steps = [r.step for r in records]
        ax.plot(steps, [r.train_loss for r in records], label="train loss (nats)")
        evals = [(r.step, r.eval_metric) for r in records if r.eval_metric is not None]
        if evals:
            ax.plot(*zip(*evals), "o-", label="valid BPC" if task == "lm" else "valid accuracy")
        ax.set_xlabel("step")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def plot_shift(rows, path: str | Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=_figsize(4.5))
        ax.plot([r[0] for r in rows], [100.0 * r[1] for r in rows], "o-")
        ax.set_xlabel("shift (placeholders prepended)")
        ax.set_ylabel("accuracy (%)")
        fig.tight_layout()
        return _save(fig, path)
