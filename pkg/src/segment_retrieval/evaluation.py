"""Retrieval metrics, query sets, judge records and score-distribution export.

``mean_ap`` is the mean reciprocal rank of the single ground truth per query.
With one labeled positive per query this is what the usual mAP reduces to,
and it is reported under that name.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IncompleteJudgmentError, IndexingError, InvalidInputError
from .segmentation import SegmentSpec

logger = logging.getLogger(__name__)

__all__ = [
    "Query",
    "JudgeOutput",
    "recall_at_k",
    "mean_ap",
    "mean_sbert_at_k",
    "vlm_aggregate",
    "per_query_means",
    "score_histogram",
    "write_histogram_csv",
    "sample_queries",
    "write_queries",
    "read_queries",
    "read_judgments",
    "write_judgments",
    "attribute_judge",
    "PrecomputedEmbedder",
    "caption_slots",
    "write_metrics",
]


def _ranks(ranks):
    r = np.asarray(ranks)
    if r.size == 0:
        raise InvalidInputError("rank list is empty")
    if np.any(r < 1):
        raise InvalidInputError("ranks must be >= 1")
    return r


def recall_at_k(ranks, K):
    """Fraction of queries whose ground truth is ranked within the top ``K``."""
    if K < 1:
        raise InvalidInputError("K must be >= 1")
    return float(np.mean(_ranks(ranks) <= K))


def mean_ap(ranks):
    """Mean of ``1 / rank`` over queries."""
    return float(np.mean(1.0 / _ranks(ranks)))


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise InvalidInputError("sentence embedding is the zero vector")
    return v / n


def mean_sbert_at_k(query_caption, retrieved_captions, embedder):
    """Mean cosine between the query and each retrieved caption under ``embedder``."""
    if len(retrieved_captions) < 1:
        raise InvalidInputError("need at least one retrieved caption")
    q = _unit(embedder(query_caption))
    return float(np.mean([q @ _unit(embedder(c)) for c in retrieved_captions]))


class PrecomputedEmbedder:
    """Caption -> vector lookup backed by NDJSON ``{caption, vector}`` records."""

    def __init__(self, table):
        self.table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        if not path.exists():
            raise InvalidInputError(f"embedding file not found: {path}")
        with open(path) as fh:
            recs = [json.loads(line) for line in fh if line.strip()]
        return cls({r["caption"]: r["vector"] for r in recs})

    def __call__(self, caption):
        try:
            return self.table[caption]
        except KeyError:
            raise IndexingError(f"caption not in precomputed embeddings: {caption!r}") from None


# --- judge -----------------------------------------------------------------

@dataclass(frozen=True)
class JudgeOutput:
    query_id: str
    rank: int
    score: int
    label: int

    def __post_init__(self):
        if int(self.score) != self.score or not 1 <= self.score <= 5:
            raise InvalidInputError(f"judge score must be an integer in 1..5, got {self.score}")
        if self.label not in (0, 1):
            raise InvalidInputError(f"judge label must be 0 or 1, got {self.label}")
        if self.rank < 1:
            raise InvalidInputError("rank must be >= 1")


def _judgment_table(judgments, K, query_ids=None):
    table = {}
    for j in judgments:
        if j.rank > K:
            continue
        cell = (str(j.query_id), int(j.rank))
        if cell in table:
            raise InvalidInputError(f"duplicate judgment for query {cell[0]!r}, rank {cell[1]}")
        table[cell] = j
    queries = sorted(set(map(str, query_ids)) if query_ids is not None
                     else {q for q, _ in table})
    missing = [(q, r) for q in queries for r in range(1, K + 1) if (q, r) not in table]
    return table, queries, missing


def vlm_aggregate(judgments, N_q, K, query_ids=None):
    """``(Score@K, Precision@K)``: per-query means over ranks, averaged over queries."""
    if K < 1 or N_q < 1:
        raise InvalidInputError("N_q and K must be >= 1")
    table, queries, missing = _judgment_table(judgments, K, query_ids)
    if len(queries) != N_q:
        raise IncompleteJudgmentError(
            f"judgments cover {len(queries)} queries, expected {N_q}", missing)
    if missing:
        raise IncompleteJudgmentError(f"{len(missing)} (query, rank) cells lack a judgment",
                                      missing)
    score = np.mean([np.mean([table[q, r].score for r in range(1, K + 1)]) for q in queries])
    prec = np.mean([np.mean([table[q, r].label for r in range(1, K + 1)]) for q in queries])
    return float(score), float(prec)


def per_query_means(judgments, K):
    table, queries, missing = _judgment_table(judgments, K)
    if missing:
        raise IncompleteJudgmentError(f"{len(missing)} (query, rank) cells lack a judgment",
                                      missing)
    return {q: float(np.mean([table[q, r].score for r in range(1, K + 1)])) for q in queries}


def score_histogram(values, bins=8, lo=1.0, hi=5.0):
    """Counts of per-query mean judge scores over uniform bins on ``[lo, hi]``."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise InvalidInputError("no values to histogram")
    if np.any(v < lo) or np.any(v > hi):
        raise InvalidInputError(f"values must lie in [{lo}, {hi}]")
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    return edges, counts


def write_histogram_csv(path, edges, counts):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([f"{lo:.6g}", f"{hi:.6g}", int(c)])


def read_judgments(path):
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"judgment file not found: {path}")
    with open(path) as fh:
        return [JudgeOutput(str(r["query_id"]), int(r["rank"]), int(r["score"]), int(r["label"]))
                for r in map(json.loads, filter(str.strip, fh))]


def write_judgments(path, judgments):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for j in judgments:
            fh.write(json.dumps({"query_id": j.query_id, "rank": j.rank, "score": j.score,
                                 "label": j.label}, separators=(",", ":")) + "\n")


def caption_slots(caption):
    """The four descriptive words of a synthetic caption, or the full token set otherwise."""
    words = caption.replace(",", " ").split()
    if len(words) >= 8 and words[2] == "segment" and words[4] == "baseline":
        return (words[0], words[1], words[3], words[7])
    return tuple(sorted(set(words)))


def attribute_judge(query_id, query_caption, retrieved_captions):
    """Offline judge stand-in: score 1 plus one point per matching caption attribute.

    A retrieved segment is labeled a match when at least three of its four
    attributes agree with the query.
    """
    q = caption_slots(query_caption)
    out = []
    for rank, cap in enumerate(retrieved_captions, start=1):
        c = caption_slots(cap)
        if len(q) == 4 and len(c) == 4:
            agree = sum(a == b for a, b in zip(q, c))
        else:
            agree = round(4 * len(set(q) & set(c)) / max(len(set(q) | set(c)), 1))
        out.append(JudgeOutput(str(query_id), rank, 1 + agree, int(agree >= 3)))
    return out


# --- query sets ------------------------------------------------------------

@dataclass(frozen=True)
class Query:
    query_id: str
    caption: str
    gt: SegmentSpec

    def __post_init__(self):
        if not self.caption.strip():
            raise InvalidInputError(f"query {self.query_id!r} has an empty caption")


def sample_queries(records, N_q, seed=0):
    """Draw ``N_q`` distinct segment-caption pairs uniformly without replacement."""
    records = sorted(records, key=lambda r: r.spec.key())
    if not 1 <= N_q <= len(records):
        raise InvalidInputError(f"cannot sample {N_q} queries from {len(records)} pairs")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(records), size=N_q, replace=False))
    return [Query(f"q{k:04d}", records[i].caption, records[i].spec)
            for k, i in enumerate(chosen)]


def write_queries(path, queries):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for q in queries:
            fh.write(json.dumps({"query_id": q.query_id, "caption": q.caption,
                                 "window_id": q.gt.window_id, "a": q.gt.a, "b": q.gt.b},
                                separators=(",", ":")) + "\n")


def read_queries(path):
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"query file not found: {path}")
    with open(path) as fh:
        return [Query(r["query_id"], r["caption"], SegmentSpec(r["window_id"], r["a"], r["b"]))
                for r in map(json.loads, filter(str.strip, fh))]


def write_metrics(path, metrics):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
