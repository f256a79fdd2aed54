"""Curvature-based change points on a TV2 trend and their conversion to segments.

Indices in this module follow the persisted 1-based convention: the
second difference at time ``t`` is ``x[t+1] - 2 x[t] + x[t-1]`` for interior
``t = 2..L-1`` and segments are inclusive ``(a, b)`` pairs with
``1 <= a < b <= L``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .trend_filter import SolverOptions, Tv2Problem, second_diff, solve_tv2

logger = logging.getLogger(__name__)

__all__ = [
    "SegmentSpec",
    "SegmentationConfig",
    "SegmentationResult",
    "curvature_threshold",
    "detect_change_points",
    "boundaries_to_segments",
    "segment_window",
    "write_segments",
    "read_segments",
]


@dataclass(frozen=True, order=True)
class SegmentSpec:
    window_id: str
    a: int
    b: int

    def __post_init__(self):
        if not (1 <= self.a < self.b):
            raise InvalidInputError(f"invalid segment bounds ({self.a}, {self.b})")

    @property
    def length(self):
        return self.b - self.a + 1

    def key(self):
        return (self.window_id, self.a, self.b)


@dataclass(frozen=True)
class SegmentationConfig:
    lambda_init: float = 100.0
    lambda_factor: float = 10.0
    M_max: int = 6
    L_min: int = 50
    sigma_multiplier: float = 3.0
    # change points closer than this are one bend smeared over several samples
    merge_gap: int = 10
    max_escalations: int = 12
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(method="ipm"))

    def __post_init__(self):
        if not self.lambda_init > 0:
            raise InvalidInputError("lambda_init must be > 0")
        if not self.lambda_factor > 1:
            raise InvalidInputError("lambda_factor must be > 1")
        if self.M_max < 1:
            raise InvalidInputError("M_max must be >= 1")
        if self.L_min < 1:
            raise InvalidInputError("L_min must be >= 1")
        if self.merge_gap < 1:
            raise InvalidInputError("merge_gap must be >= 1")


@dataclass
class SegmentationResult:
    window_id: str
    lambda_used: float
    change_points: list
    segments: list
    captionable: list
    escalations: int = 0
    fell_back: bool = False


def curvature_threshold(d, sigma_multiplier=3.0):
    """``sigma_multiplier`` times the std of ``d`` with denominator ``len(d)``."""
    d = np.asarray(d, dtype=np.float64)
    if d.size == 0:
        return 0.0
    return sigma_multiplier * math.sqrt(float(np.sum((d - d.mean()) ** 2)) / d.size)


def _threshold_points(d, sigma_multiplier):
    theta = curvature_threshold(d, sigma_multiplier)
    return [int(i) + 2 for i in np.flatnonzero(np.abs(d) > theta)]


def detect_change_points(trend, sigma_multiplier=3.0):
    """Interior times ``t`` (1-based) where ``|second difference| > k * sigma``.

    The comparison is strict, so an affine trend (all zeros, sigma 0) has no
    change points.
    """
    trend = np.asarray(trend, dtype=np.float64)
    if trend.size < 3:
        raise InvalidInputError(f"trend needs at least 3 points, got {trend.size}")
    return _threshold_points(second_diff(trend), sigma_multiplier)


def boundaries_to_segments(change_points, L_w, window_id="", curvature=None, min_gap=2):
    """Tile ``[1, L_w]`` with segments that share their boundary index.

    Change points closer than ``min_gap`` apart are merged, keeping the one
    with the larger ``|curvature|``.  ``curvature`` is the length ``L_w - 2`` second
    difference (index ``t - 2`` for time ``t``); without it the earlier point
    of a close pair is kept.
    """
    points = sorted(set(int(p) for p in change_points))
    for p in points:
        if not 1 < p < L_w:
            raise InvalidInputError(f"change point {p} outside the open interval (1, {L_w})")
    mag = None if curvature is None else np.abs(np.asarray(curvature, dtype=np.float64))

    kept = []
    for p in points:
        if kept and p - kept[-1] < min_gap:
            if mag is not None and mag[p - 2] > mag[kept[-1] - 2]:
                kept[-1] = p
            continue
        kept.append(p)

    bounds = [1] + kept + [L_w]
    return [SegmentSpec(window_id, a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def _trend_curvature(solution):
    if solution.polished:
        # exact zeros off the certified support
        return solution.z
    if not solution.optimal:
        logger.warning("TV2 solve not converged (lambda=%g, %d iterations)",
                       solution.lam, solution.iterations)
    return second_diff(solution.u)


def segment_window(window, cfg=None, solver=solve_tv2):
    """Segment one normalized window with the adaptive-lambda loop.

    lambda starts at ``cfg.lambda_init`` and is multiplied by
    ``cfg.lambda_factor`` until at most ``cfg.M_max`` segments remain.  After
    ``cfg.max_escalations`` multiplications the ``M_max - 1`` change points
    with the largest ``|curvature|`` are kept instead.
    """
    cfg = cfg or SegmentationConfig()
    x = np.asarray(window.values, dtype=np.float64)
    L = x.size
    if L < 3:
        raise InvalidInputError(f"window {window.window_id!r} is too short to segment")

    if getattr(window, "degenerate", False) or np.ptp(x) == 0:
        segments = [SegmentSpec(window.window_id, 1, L)]
        return SegmentationResult(
            window_id=window.window_id, lambda_used=0.0, change_points=[],
            segments=segments, captionable=[s for s in segments if s.length >= cfg.L_min],
        )

    lam = cfg.lambda_init
    prev_support = None
    fell_back = False
    escalations = 0
    while True:
        sol = solver(Tv2Problem(x, lam), cfg.solver)
        curv = _trend_curvature(sol)
        support = int(np.count_nonzero(curv))
        if prev_support is not None and support > prev_support:
            logger.info("window %s: curvature support grew from %d to %d at lambda=%g",
                        window.window_id, prev_support, support, lam)
        prev_support = support

        points = _threshold_points(curv, cfg.sigma_multiplier)
        segments = boundaries_to_segments(points, L, window.window_id, curv, cfg.merge_gap)
        if len(segments) <= cfg.M_max:
            break
        if escalations >= cfg.max_escalations:
            merged = [s.a for s in segments[1:]]
            strongest = sorted(merged, key=lambda p: (-abs(curv[p - 2]), p))[: cfg.M_max - 1]
            segments = boundaries_to_segments(strongest, L, window.window_id, curv, cfg.merge_gap)
            fell_back = True
            break
        lam *= cfg.lambda_factor
        escalations += 1

    return SegmentationResult(
        window_id=window.window_id,
        lambda_used=float(lam),
        change_points=[s.a for s in segments[1:]],
        segments=segments,
        captionable=[s for s in segments if s.length >= cfg.L_min],
        escalations=escalations,
        fell_back=fell_back,
    )


def write_segments(path, results):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for res in results:
            captionable = {s.key() for s in res.captionable}
            for seg in res.segments:
                rec = {"window_id": seg.window_id, "a": seg.a, "b": seg.b,
                       "lambda_used": res.lambda_used,
                       "captionable": seg.key() in captionable}
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_segments(path, captionable_only=False):
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"segment file not found: {path}")
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if captionable_only and not rec.get("captionable", True):
                continue
            out.append(SegmentSpec(rec["window_id"], int(rec["a"]), int(rec["b"])))
    return out
