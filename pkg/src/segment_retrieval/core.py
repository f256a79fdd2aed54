"""Raw-series ingestion, window allocation/extraction and min-max normalization."""

from __future__ import annotations

import csv
import json
import logging
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import InvalidInputError

logger = logging.getLogger(__name__)

__all__ = [
    "RawSeries",
    "Window",
    "SamplingConfig",
    "Normalized",
    "allocate_windows",
    "available_offsets",
    "extract_windows",
    "interpolate_to_length",
    "normalize_minmax",
    "normalize_window",
    "sample_subset",
    "read_subset",
    "write_windows",
    "read_windows",
]


@dataclass(frozen=True)
class RawSeries:
    series_id: str
    values: np.ndarray
    subset_id: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if values.size < 1:
            raise InvalidInputError(f"series {self.series_id!r} is empty")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError(f"series {self.series_id!r} contains non-finite values")
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class Window:
    window_id: str
    subset_id: str
    series_id: str
    start_offset: int
    values: np.ndarray
    normalized: bool = False
    degenerate: bool = False

    def __len__(self):
        return self.values.size

    def to_record(self):
        return {
            "window_id": self.window_id,
            "subset_id": self.subset_id,
            "series_id": self.series_id,
            "start_offset": int(self.start_offset),
            "values": [float(v) for v in self.values],
            "degenerate": bool(self.degenerate),
        }

    @classmethod
    def from_record(cls, rec):
        return cls(
            window_id=rec["window_id"],
            subset_id=rec.get("subset_id", ""),
            series_id=rec.get("series_id", ""),
            start_offset=int(rec.get("start_offset", 0)),
            values=np.asarray(rec["values"], dtype=np.float64),
            normalized=rec.get("normalized", True),
            degenerate=bool(rec.get("degenerate", False)),
        )


@dataclass(frozen=True)
class SamplingConfig:
    L_w: int = 1024
    N_target: int = 1000
    initial_stride: int = 1024
    allow_duplicates: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.L_w < 3:
            raise InvalidInputError(f"L_w must be >= 3, got {self.L_w}")
        if self.N_target < 1:
            raise InvalidInputError(f"N_target must be >= 1, got {self.N_target}")
        if self.initial_stride < 1:
            raise InvalidInputError(f"initial_stride must be >= 1, got {self.initial_stride}")


class Normalized(NamedTuple):
    values: np.ndarray
    vmin: float
    vmax: float
    degenerate: bool


def allocate_windows(N_target, series_lengths):
    """Split ``N_target`` windows as evenly as possible across the series.

    Every series gets ``N_target // N`` windows and the first
    ``N_target % N`` series (input order) get one more.
    """
    n = len(series_lengths)
    if n == 0:
        raise InvalidInputError("cannot allocate windows over an empty series list")
    if N_target < 1:
        raise InvalidInputError(f"N_target must be >= 1, got {N_target}")
    base, extra = divmod(int(N_target), n)
    return [base + 1 if i < extra else base for i in range(n)]


def interpolate_to_length(values, length):
    """Resample ``values`` linearly so index ``0..L-1`` maps onto ``0..length-1``."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise InvalidInputError("cannot interpolate an empty series")
    if values.size == 1:
        return np.full(length, values[0])
    grid = np.linspace(0.0, values.size - 1, length)
    return np.interp(grid, np.arange(values.size, dtype=np.float64), values)


def _n_offsets(span, stride):
    # offsets 0, s, 2s, ... plus the end-anchored offset ``span``
    return 1 if span == 0 else math.ceil(span / stride) + 1


def available_offsets(length, L_w, stride):
    """Distinct window start offsets at ``stride``; the last one is end-anchored."""
    span = length - L_w
    if span < 0:
        raise InvalidInputError(f"series of length {length} is shorter than L_w={L_w}")
    count = _n_offsets(span, stride)
    return [min(k * stride, span) for k in range(count)]


def _feasible_stride(span, count, initial):
    """Largest stride <= ``initial`` that yields at least ``count`` offsets, or None."""
    if _n_offsets(span, initial) >= count:
        return initial
    if span == 0:
        return None
    if count <= 2:
        return initial
    # ceil(span / s) >= count - 1  <=>  s < span / (count - 2)
    stride = min(initial, math.ceil(span / (count - 2)) - 1)
    while stride >= 1 and _n_offsets(span, stride) < count:
        stride -= 1
    return stride if stride >= 1 else None


def extract_windows(series, count, cfg):
    """Cut ``count`` windows of length ``cfg.L_w`` out of ``series``.

    The stride starts at ``cfg.initial_stride`` and shrinks to the largest
    stride that still yields ``count`` distinct offsets.  When even stride 1
    is not enough, the distinct offsets are repeated cyclically (only if
    ``cfg.allow_duplicates``).  Series shorter than ``L_w`` are linearly
    interpolated to ``L_w`` first.  Windows are returned raw (unnormalized).
    """
    if count < 0:
        raise InvalidInputError(f"count must be >= 0, got {count}")
    if count == 0:
        return []
    values = np.asarray(series.values, dtype=np.float64)
    if values.size == 0:
        raise InvalidInputError(f"series {series.series_id!r} is empty")
    L_w = cfg.L_w
    if values.size < L_w:
        values = interpolate_to_length(values, L_w)

    span = values.size - L_w
    stride = _feasible_stride(span, count, cfg.initial_stride)
    if stride is None:
        if not cfg.allow_duplicates:
            raise InvalidInputError(
                f"series {series.series_id!r} yields fewer than {count} distinct windows")
        distinct = available_offsets(values.size, L_w, 1)
        offsets = [distinct[i % len(distinct)] for i in range(count)]
    else:
        distinct = available_offsets(values.size, L_w, stride)
        if len(distinct) > count:
            key = f"{series.subset_id}:{series.series_id}"
            rng = np.random.default_rng([cfg.rng_seed, _stable_hash(key)])
            chosen = np.sort(rng.choice(len(distinct), size=count, replace=False))
            offsets = [distinct[i] for i in chosen]
        else:
            offsets = distinct

    return [
        Window(
            window_id=f"{series.subset_id}:{series.series_id}:{k}",
            subset_id=series.subset_id,
            series_id=series.series_id,
            start_offset=int(off),
            values=values[off:off + L_w].copy(),
        )
        for k, off in enumerate(offsets)
    ]


def _stable_hash(text):
    return zlib.crc32(text.encode("utf-8"))


def normalize_minmax(values):
    """Scale to ``[0, 1]``; a constant input maps to 0.5 everywhere and is flagged."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 1:
        raise InvalidInputError("cannot normalize an empty sequence")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("cannot normalize non-finite values")
    vmin, vmax = float(arr.min()), float(arr.max())
    if vmax == vmin:
        return Normalized(np.full(arr.shape, 0.5), vmin, vmax, True)
    out = (arr - vmin) / (vmax - vmin)
    # guard the endpoints against roundoff
    np.clip(out, 0.0, 1.0, out=out)
    return Normalized(out, vmin, vmax, False)


def normalize_window(window):
    norm = normalize_minmax(window.values)
    return Window(
        window_id=window.window_id, subset_id=window.subset_id, series_id=window.series_id,
        start_offset=window.start_offset, values=norm.values, normalized=True,
        degenerate=norm.degenerate,
    )


def sample_subset(series_list, cfg):
    """Allocate, extract and normalize ``cfg.N_target`` windows for one subset."""
    series_list = list(series_list)
    counts = allocate_windows(cfg.N_target, [len(s) for s in series_list])
    windows = []
    for series, count in zip(series_list, counts):
        windows.extend(normalize_window(w) for w in extract_windows(series, count, cfg))
    return windows


# --- ingestion -------------------------------------------------------------

def _read_csv(path, subset_id):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return []
    header = rows[0]
    columns = [[] for _ in header]
    for lineno, row in enumerate(rows[1:], start=2):
        for j, cell in enumerate(row[:len(header)]):
            cell = cell.strip()
            if cell == "":
                continue
            try:
                columns[j].append(float(cell))
            except ValueError:
                raise InvalidInputError(f"{path}:{lineno}: not a number: {cell!r}") from None
    stem = Path(path).stem
    out = []
    for name, col in zip(header, columns):
        if not col:
            continue
        series_id = name.strip() or f"col{len(out)}"
        if stem not in ("series", "data"):
            series_id = f"{stem}.{series_id}"
        out.append(RawSeries(series_id=series_id, values=np.asarray(col), subset_id=subset_id))
    return out


def _read_ndjson(path, subset_id):
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                out.append(RawSeries(series_id=str(rec["series_id"]), values=rec["values"],
                                     subset_id=subset_id))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise InvalidInputError(f"{path}:{lineno}: bad series record ({exc})") from None
    return out


def read_subset(directory):
    """Load every series of a subset directory (``*.csv`` columns, ``*.ndjson`` records).

    The subset id is the directory name; files are read in sorted order.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise InvalidInputError(f"subset directory not found: {directory}")
    subset_id = directory.name
    series = []
    for path in sorted(directory.iterdir()):
        if path.suffix == ".csv":
            series.extend(_read_csv(path, subset_id))
        elif path.suffix in (".ndjson", ".jsonl"):
            series.extend(_read_ndjson(path, subset_id))
    if not series:
        raise InvalidInputError(f"no series found in {directory}")
    return series


def write_windows(path, windows: Iterable[Window]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for w in windows:
            fh.write(json.dumps(w.to_record(), separators=(",", ":")) + "\n")


def read_windows(path) -> list[Window]:
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"window file not found: {path}")
    with open(path) as fh:
        return [Window.from_record(json.loads(line)) for line in fh if line.strip()]
