"""Synthetic piecewise-linear series for tests, demos and the bundled fixture."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

__all__ = [
    "planted_knots",
    "piecewise_linear",
    "noisy_piecewise_window",
    "random_series",
    "write_fixture",
]


def planted_knots(rng, length, n_knots, min_gap=None):
    """Draw ``n_knots`` sorted interior knots at least ``min_gap`` apart."""
    min_gap = min_gap or max(length // (2 * (n_knots + 1)), 8)
    while True:
        knots = np.sort(rng.integers(min_gap, length - min_gap, size=n_knots))
        if n_knots == 0 or np.all(np.diff(np.concatenate([[0], knots, [length - 1]])) >= min_gap):
            return [int(k) for k in knots]


def piecewise_linear(length, knots, levels):
    """Linear interpolation through ``levels`` at ``[0, *knots, length-1]``."""
    nodes = np.concatenate([[0], np.asarray(knots, dtype=float), [length - 1]])
    return np.interp(np.arange(length, dtype=float), nodes, np.asarray(levels, dtype=float))


def noisy_piecewise_window(rng, length=1024, n_knots=3, noise=0.01, min_turn=0.35):
    """A ``[0, 1]`` piecewise-linear signal with planted knots plus Gaussian noise.

    Consecutive pieces alternate direction so every knot has a clear bend
    (``min_turn`` bounds the level change of each piece from below).
    Returns ``(values, knots)`` with 0-based knot positions.
    """
    knots = planted_knots(rng, length, n_knots)
    levels = [float(rng.uniform(0.0, 0.3))]
    direction = 1.0
    for _ in range(n_knots + 1):
        span = rng.uniform(min_turn, 1.0)
        nxt = levels[-1] + direction * span
        if not 0.0 <= nxt <= 1.0:
            nxt = levels[-1] - direction * span
            if not 0.0 <= nxt <= 1.0:
                nxt = 1.0 if direction > 0 else 0.0
        levels.append(float(nxt))
        direction = 1.0 if nxt < levels[-2] else -1.0
    clean = piecewise_linear(length, knots, levels)
    values = clean + rng.normal(0.0, noise, size=length)
    return values, knots


_SHAPES = ("trend", "vee", "step", "oscillate", "flat", "spike")


def random_series(rng, length, noise_levels=(0.003, 0.04, 0.15)):
    """A varied raw series: piecewise trends with mixed noise and occasional spikes."""
    n_knots = int(rng.integers(1, 6))
    knots = planted_knots(rng, length, n_knots, min_gap=max(length // 12, 8))
    levels = rng.uniform(0.0, 1.0, size=n_knots + 2)
    # some pieces flat, to populate the "flat" vocabulary
    for i in range(1, levels.size):
        if rng.random() < 0.25:
            levels[i] = levels[i - 1]
    base = piecewise_linear(length, knots, levels)
    nodes = np.concatenate([[0], knots, [length - 1]]).astype(int)
    noise = np.empty(length)
    for lo, hi in zip(nodes[:-1], nodes[1:]):
        sigma = float(rng.choice(noise_levels))
        noise[lo:hi + 1] = rng.normal(0.0, sigma, size=hi - lo + 1)
    scale = float(rng.uniform(0.5, 20.0))
    offset = float(rng.uniform(-10.0, 10.0))
    return offset + scale * (base + noise)


def write_fixture(root, n_subsets=(4, 2, 3), series_per_subset=20, series_length=2048,
                  seed=0):
    """Write a small data directory: one CSV per subset plus train/val/test lists.

    ``n_subsets`` gives the number of train/val/test subsets.  Returns the
    list of subset names per split.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    splits = {"train": [], "val": [], "test": []}
    for split, count in zip(("train", "val", "test"), n_subsets):
        for i in range(count):
            name = f"{split}_subset_{i:02d}"
            splits[split].append(name)
            subset_dir = root / name
            subset_dir.mkdir(parents=True, exist_ok=True)
            columns = []
            for _ in range(series_per_subset):
                # vary lengths so some series need interpolation or overlapping windows
                length = int(rng.integers(series_length // 4, series_length + 1))
                columns.append(random_series(rng, length))
            depth = max(len(c) for c in columns)
            with open(subset_dir / "series.csv", "w") as fh:
                fh.write(",".join(f"s{j}" for j in range(len(columns))) + "\n")
                for r in range(depth):
                    cells = [f"{c[r]:.6f}" if r < len(c) else "" for c in columns]
                    fh.write(",".join(cells) + "\n")
    split_dir = root / "splits"
    split_dir.mkdir(parents=True, exist_ok=True)
    for split, names in splits.items():
        (split_dir / f"{split}.txt").write_text("".join(n + "\n" for n in names))
    (root / "fixture.json").write_text(json.dumps({"seed": seed, "splits": splits}, indent=2))
    return splits
