"""Segment captions: a deterministic rule-based captioner and a VLM HTTP client.

The VLM path renders each window as a single-panel SVG (full series in light
gray, every target segment as a translucent band plus a thicker colored line,
ordinal labels above the segment centers) and posts it to an HTTP endpoint
that must answer ``{"captions": [...]}`` with one caption per segment.
"""

from __future__ import annotations

import base64
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests

from .errors import CaptioningFailure, CaptionValidationError, InvalidInputError
from .segmentation import SegmentSpec

logger = logging.getLogger(__name__)

__all__ = [
    "SegmentRecord",
    "PlotSpec",
    "VlmClientConfig",
    "VlmClient",
    "render_window_plot",
    "index_to_px",
    "px_to_index",
    "segment_features",
    "synthesize_caption",
    "caption_via_vlm",
    "caption_windows",
    "build_prompt",
    "write_records",
    "read_records",
]

CAPTION_SOURCES = ("synthetic", "vlm", "file")


@dataclass(frozen=True)
class SegmentRecord:
    spec: SegmentSpec
    caption: str
    caption_source: str = "synthetic"

    def __post_init__(self):
        if not self.caption or not self.caption.strip():
            raise InvalidInputError(f"empty caption for {self.spec}")
        if self.caption_source not in CAPTION_SOURCES:
            raise InvalidInputError(f"unknown caption source {self.caption_source!r}")

    def to_record(self):
        return {"window_id": self.spec.window_id, "a": self.spec.a, "b": self.spec.b,
                "caption": self.caption, "caption_source": self.caption_source}

    @classmethod
    def from_record(cls, rec):
        return cls(SegmentSpec(rec["window_id"], int(rec["a"]), int(rec["b"])),
                   rec["caption"], rec.get("caption_source", "file"))


def write_records(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_record(), separators=(",", ":")) + "\n")


def read_records(path):
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"pair file not found: {path}")
    with open(path) as fh:
        return [SegmentRecord.from_record(json.loads(line)) for line in fh if line.strip()]


# --- rendering -------------------------------------------------------------

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
           "#e377c2", "#17becf")


@dataclass(frozen=True)
class PlotSpec:
    width: int = 800
    height: int = 300
    margin_left: int = 20
    margin_right: int = 20
    margin_top: int = 30
    margin_bottom: int = 20
    series_color: str = "#c8c8c8"
    series_width: float = 1.0
    segment_width: float = 2.5
    band_opacity: float = 0.18
    label_size: int = 14
    palette: tuple = PALETTE

    @property
    def plot_width(self):
        return self.width - self.margin_left - self.margin_right

    @property
    def plot_height(self):
        return self.height - self.margin_top - self.margin_bottom


def index_to_px(i, length, spec):
    """x pixel of 1-based sample index ``i``."""
    if length < 2:
        return spec.margin_left + spec.plot_width / 2
    return spec.margin_left + (i - 1) * spec.plot_width / (length - 1)


def px_to_index(px, length, spec):
    """Inverse of :func:`index_to_px`, rounded to the nearest 1-based index."""
    if length < 2:
        return 1
    return int(round((px - spec.margin_left) * (length - 1) / spec.plot_width)) + 1


def _fmt(v):
    return f"{v:.2f}"


def render_window_plot(window, segments, spec=None):
    """Render the captioning input plot as a byte-deterministic SVG string."""
    spec = spec or PlotSpec()
    values = np.asarray(window.values, dtype=np.float64)
    n = values.size
    if n == 0:
        raise InvalidInputError("cannot render an empty window")
    for seg in segments:
        if not (1 <= seg.a < seg.b <= n):
            raise InvalidInputError(f"segment ({seg.a}, {seg.b}) outside window of length {n}")

    lo, hi = float(values.min()), float(values.max())
    span = hi - lo if hi > lo else 1.0
    top, bottom = spec.margin_top, spec.margin_top + spec.plot_height

    def ypx(v):
        return bottom - (v - lo) / span * spec.plot_height

    def points(a, b):
        return " ".join(f"{_fmt(index_to_px(i, n, spec))},{_fmt(ypx(values[i - 1]))}"
                        for i in range(a, b + 1))

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{spec.width}" '
        f'height="{spec.height}" viewBox="0 0 {spec.width} {spec.height}">',
        f'<rect x="0" y="0" width="{spec.width}" height="{spec.height}" fill="#ffffff"/>',
    ]
    ordered = sorted(segments, key=lambda s: (s.a, s.b))
    for k, seg in enumerate(ordered):
        color = spec.palette[k % len(spec.palette)]
        x0, x1 = index_to_px(seg.a, n, spec), index_to_px(seg.b, n, spec)
        out.append(
            f'<rect class="band" data-a="{seg.a}" data-b="{seg.b}" x="{_fmt(x0)}" '
            f'y="{_fmt(top)}" width="{_fmt(x1 - x0)}" height="{_fmt(spec.plot_height)}" '
            f'fill="{color}" fill-opacity="{spec.band_opacity}"/>')
    out.append(
        f'<polyline class="series" fill="none" stroke="{spec.series_color}" '
        f'stroke-width="{spec.series_width}" points="{points(1, n)}"/>')
    for k, seg in enumerate(ordered):
        color = spec.palette[k % len(spec.palette)]
        out.append(
            f'<polyline class="segment" fill="none" stroke="{color}" '
            f'stroke-width="{spec.segment_width}" points="{points(seg.a, seg.b)}"/>')
    for k, seg in enumerate(ordered):
        color = spec.palette[k % len(spec.palette)]
        cx = index_to_px((seg.a + seg.b) / 2, n, spec)
        peak = float(values[seg.a - 1:seg.b].max())
        cy = max(ypx(peak) - 6, spec.label_size)
        out.append(
            f'<text x="{_fmt(cx)}" y="{_fmt(cy)}" fill="{color}" font-size="{spec.label_size}" '
            f'font-family="sans-serif" font-weight="bold" text-anchor="middle">{k + 1}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# --- rule-based captions ---------------------------------------------------

FLAT_SLOPE_PER_100 = 0.02
SMOOTH_STD = 0.02
VOLATILE_STD = 0.1
# a 0.1 band put most segments at "near"; 0.05 keeps the three level words comparable
LEVEL_BAND = 0.05


def segment_features(window, spec):
    """Statistics behind the synthetic caption of ``spec`` within ``window``."""
    values = np.asarray(window.values, dtype=np.float64)
    n = values.size
    if not (1 <= spec.a < spec.b <= n):
        raise InvalidInputError(f"segment ({spec.a}, {spec.b}) outside window of length {n}")
    seg = values[spec.a - 1:spec.b]
    t = np.arange(seg.size, dtype=np.float64)
    slope, intercept = np.polyfit(t, seg, 1)
    resid = seg - (intercept + slope * t)
    center = ((spec.a + spec.b) / 2 - 1) / max(n - 1, 1)
    return {
        "slope_per_100": float(slope * 100.0),
        "residual_std": float(resid.std()),
        "level_offset": float(seg.mean() - values.mean()),
        "center": float(center),
    }


def synthesize_caption(window, spec):
    """Deterministic caption from slope, residual spread, level and position."""
    f = segment_features(window, spec)
    slope = f["slope_per_100"]
    if abs(slope) < FLAT_SLOPE_PER_100:
        trend = "flat"
    else:
        trend = "rising" if slope > 0 else "falling"

    std = f["residual_std"]
    if std < SMOOTH_STD:
        volatility = "smooth"
    elif std < VOLATILE_STD:
        volatility = "noisy"
    else:
        volatility = "volatile"

    offset = f["level_offset"]
    if offset > LEVEL_BAND:
        level = "above"
    elif offset < -LEVEL_BAND:
        level = "below"
    else:
        level = "near"

    c = f["center"]
    position = "opening" if c < 1 / 3 else ("middle" if c < 2 / 3 else "closing")
    return f"{volatility} {trend} segment {level} baseline, in the {position} part of the series"


# --- VLM client ------------------------------------------------------------

@dataclass(frozen=True)
class VlmClientConfig:
    endpoint: str = "http://127.0.0.1:8765/caption"
    model: str = "gpt-5.2"
    timeout: float = 60.0
    max_retries: int = 3
    backoff: tuple = (1.0, 2.0, 4.0)
    max_in_flight: int = 4
    image_format: str = "svg"

    def __post_init__(self):
        if self.max_retries < 0:
            raise InvalidInputError("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise InvalidInputError("max_in_flight must be >= 1")

    def delay(self, retry):
        if not self.backoff:
            return 0.0
        return float(self.backoff[min(retry, len(self.backoff) - 1)])


def build_prompt(n_segments):
    return (
        "The image shows one normalized time-series window in light gray. "
        f"{n_segments} segment(s) are highlighted with colored bands and numbered "
        f"1 to {n_segments} from left to right. For each numbered segment write one "
        "short caption describing its shape and how it stands out from the rest of "
        "the window. Answer with a JSON array of exactly "
        f"{n_segments} strings, in segment order, and nothing else."
    )


def validate_captions(payload, n_segments):
    """Return the caption list from a response payload or raise CaptionValidationError."""
    captions = payload.get("captions") if isinstance(payload, dict) else payload
    if isinstance(captions, str):
        # some endpoints return the model's JSON array as text
        try:
            captions = json.loads(captions)
        except json.JSONDecodeError:
            raise CaptionValidationError("captions field is not a JSON array",
                                         last_response=payload) from None
    if not isinstance(captions, list):
        raise CaptionValidationError("response has no caption array", last_response=payload)
    if len(captions) != n_segments:
        raise CaptionValidationError(
            f"expected {n_segments} captions, got {len(captions)}", last_response=payload)
    if not all(isinstance(c, str) and c.strip() for c in captions):
        raise CaptionValidationError("captions must be non-empty strings", last_response=payload)
    return [c.strip() for c in captions]


@dataclass
class VlmClient:
    """HTTP client with bounded retries; ``retries`` records the last call's retry count."""

    cfg: VlmClientConfig = field(default_factory=VlmClientConfig)
    session: requests.Session | None = None
    sleep: object = time.sleep
    retries: int = 0

    def _post(self, body):
        session = self.session or requests
        resp = session.post(self.cfg.endpoint, json=body, timeout=self.cfg.timeout)
        if resp.status_code != 200:
            raise CaptioningFailure(f"HTTP {resp.status_code} from {self.cfg.endpoint}",
                                    last_response=resp.text)
        try:
            return resp.json()
        except ValueError:
            raise CaptionValidationError("response is not JSON", last_response=resp.text) from None

    def caption(self, plot, n_segments):
        if n_segments < 1:
            raise InvalidInputError("n_segments must be >= 1")
        data = plot.encode("utf-8") if isinstance(plot, str) else bytes(plot)
        body = {
            "model": self.cfg.model,
            "image": base64.b64encode(data).decode("ascii"),
            "image_format": self.cfg.image_format,
            "prompt": build_prompt(n_segments),
            "n_segments": n_segments,
        }
        last_error = None
        for attempt in range(self.cfg.max_retries + 1):
            if attempt:
                self.sleep(self.cfg.delay(attempt - 1))
            try:
                captions = validate_captions(self._post(body), n_segments)
                self.retries = attempt
                return captions
            except (CaptioningFailure, requests.RequestException) as exc:
                last_error = exc
                logger.warning("VLM attempt %d/%d failed: %s", attempt + 1,
                               self.cfg.max_retries + 1, exc)
        self.retries = self.cfg.max_retries
        attempts = self.cfg.max_retries + 1
        if isinstance(last_error, CaptionValidationError):
            raise CaptionValidationError(
                f"invalid captions after {attempts} attempts: {last_error}",
                last_response=last_error.last_response, attempts=attempts)
        last = getattr(last_error, "last_response", None) or repr(last_error)
        raise CaptioningFailure(f"captioning failed after {attempts} attempts: {last_error}",
                                last_response=last, attempts=attempts)


def caption_via_vlm(plot, n_segments, cfg=None, session=None, sleep=time.sleep):
    """Caption ``n_segments`` segments of a rendered plot through the VLM endpoint."""
    client = VlmClient(cfg or VlmClientConfig(), session=session, sleep=sleep)
    return client.caption(plot, n_segments)


def caption_windows(jobs, captioner="synthetic", cfg=None, plot_spec=None, session=None,
                    sleep=time.sleep):
    """Caption ``[(window, captionable_specs), ...]`` and return SegmentRecords in job order.

    VLM requests run on at most ``cfg.max_in_flight`` threads.
    """
    jobs = list(jobs)
    if captioner == "synthetic":
        return [SegmentRecord(spec, synthesize_caption(window, spec), "synthetic")
                for window, specs in jobs for spec in specs]
    if captioner != "vlm":
        raise InvalidInputError(f"unknown captioner {captioner!r}")
    cfg = cfg or VlmClientConfig()

    def run(job):
        window, specs = job
        if not specs:
            return []
        ordered = sorted(specs, key=lambda s: (s.a, s.b))
        svg = render_window_plot(window, ordered, plot_spec)
        captions = VlmClient(cfg, session=session, sleep=sleep).caption(svg, len(ordered))
        return [SegmentRecord(spec, cap, "vlm") for spec, cap in zip(ordered, captions)]

    with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
        results = list(pool.map(run, jobs))
    return [rec for batch in results for rec in batch]
