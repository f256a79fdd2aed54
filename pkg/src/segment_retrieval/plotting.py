"""Report figures: judge-score distribution and rank-1 retrieval examples."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_score_histogram", "plot_rank1_examples"]

# no version string or date in the file, so reruns are byte-identical
_PNG_META = {"Software": None}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_score_histogram(edges, counts, path, title="Per-query mean judge score"):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    widths = np.diff(edges)
    ax.bar(edges[:-1], counts, width=widths, align="edge", color="#4c72b0", edgecolor="white")
    ax.set_xlim(edges[0], edges[-1])
    ax.set_xlabel("mean score over top-K")
    ax.set_ylabel("queries")
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    return _save(fig, path)


def plot_rank1_examples(examples, path, n=4):
    """One row per example: ``(caption, gt_window, gt_spec, hit_window, hit_spec)``."""
    examples = list(examples)[:n]
    if not examples:
        return None
    fig, axes = plt.subplots(len(examples), 2, figsize=(9, 1.9 * len(examples)), squeeze=False)
    for row, (caption, gw, gs, hw, hs) in zip(axes, examples):
        for ax, w, s, label, color in ((row[0], gw, gs, "ground truth", "#2ca02c"),
                                       (row[1], hw, hs, "rank 1", "#d62728")):
            t = np.arange(1, len(w.values) + 1)
            ax.plot(t, w.values, color="#bbbbbb", lw=0.8)
            ax.plot(t[s.a - 1:s.b], w.values[s.a - 1:s.b], color=color, lw=1.6)
            ax.axvspan(s.a, s.b, color=color, alpha=0.12)
            ax.set_title(f"{label}: {s.window_id} [{s.a}, {s.b}]", fontsize=7)
            ax.set_xticks([])
            ax.set_yticks([])
        row[0].set_ylabel(caption[:40] + ("..." if len(caption) > 40 else ""), fontsize=6,
                          rotation=0, ha="right", va="center")
    fig.tight_layout()
    return _save(fig, path)
