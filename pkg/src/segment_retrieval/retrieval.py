"""Segment-embedding index, per-query candidate pools and exact top-K ranking."""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IndexingError, InvalidInputError
from .segmentation import SegmentSpec

logger = logging.getLogger(__name__)

__all__ = [
    "EmbeddingIndex",
    "CandidatePool",
    "RankedResult",
    "build_index",
    "save_index",
    "load_index",
    "make_pool",
    "gt_rank",
    "top_k",
    "score_and_rank",
    "random_rank",
    "write_results",
    "read_results",
]

INDEX_MAGIC = b"SEGIDX01"
INDEX_VERSION = 1


@dataclass
class EmbeddingIndex:
    specs: list
    Z: np.ndarray
    window_membership: dict = field(default_factory=dict)

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=np.float64)
        if self.Z.shape[0] != len(self.specs):
            raise InvalidInputError("row count does not match the number of specs")
        if not self.window_membership:
            members = {}
            for i, s in enumerate(self.specs):
                members.setdefault(s.window_id, []).append(i)
            self.window_membership = members

    def __len__(self):
        return len(self.specs)

    @property
    def window_ids(self):
        return sorted(self.window_membership)

    def position(self, spec):
        for i in self.window_membership.get(spec.window_id, ()):
            if self.specs[i] == spec:
                return i
        raise IndexingError(f"segment {spec.key()} is not in the index")


@dataclass
class CandidatePool:
    query_id: str
    window_ids: list
    candidate_spec_indices: list
    gt_index: int


@dataclass
class RankedResult:
    query_id: str
    items: list  # (index row, score) pairs, best first
    gt_rank: int


def build_index(specs, model, cache):
    """Embed every spec with the trained segment head; rows sorted by (window_id, a, b)."""
    unique = sorted(set(specs), key=lambda s: (s.window_id, s.a, s.b))
    if len(unique) < len(specs):
        logger.warning("dropped %d duplicate segment specs", len(specs) - len(unique))
    if not unique:
        raise InvalidInputError("cannot build an index over zero segments")
    for s in unique:
        if s.window_id not in cache.windows:
            raise IndexingError(f"segment {s.key()} references missing window {s.window_id!r}")
    pooled = np.stack([cache.pooled(s) for s in unique])
    return EmbeddingIndex(unique, model.embed_segments(pooled))


def save_index(path, index):
    """Header (magic, version, count, dim) plus little-endian float32 rows; specs in a sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, dim = index.Z.shape
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<III", INDEX_VERSION, n, dim))
        fh.write(np.ascontiguousarray(index.Z, dtype="<f4").tobytes())
    with open(_sidecar(path), "w") as fh:
        for s in index.specs:
            fh.write(json.dumps({"window_id": s.window_id, "a": s.a, "b": s.b},
                                separators=(",", ":")) + "\n")


def _sidecar(path):
    return Path(str(path) + ".specs.ndjson")


def load_index(path):
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"index file not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != INDEX_MAGIC:
        raise InvalidInputError(f"{path} is not an index file")
    version, n, dim = struct.unpack("<III", raw[8:20])
    if version != INDEX_VERSION:
        raise InvalidInputError(f"unsupported index version {version}")
    Z = np.frombuffer(raw[20:], dtype="<f4").astype(np.float64)
    if Z.size != n * dim:
        raise InvalidInputError(f"{path} is truncated")
    side = _sidecar(path)
    if not side.exists():
        raise InvalidInputError(f"index sidecar not found: {side}")
    with open(side) as fh:
        specs = [SegmentSpec(r["window_id"], int(r["a"]), int(r["b"]))
                 for r in map(json.loads, filter(str.strip, fh))]
    return EmbeddingIndex(specs, Z.reshape(n, dim))


def _query_seed(seed, query_id, *extra):
    return [int(seed), zlib.crc32(str(query_id).encode("utf-8")), *map(int, extra)]


def make_pool(gt, window_ids, N_pool, index, seed=0, query_id=None):
    """Candidate pool: the gt window plus ``N_pool - 1`` other windows drawn uniformly."""
    window_ids = sorted(set(window_ids))
    if gt.window_id not in window_ids:
        raise InvalidInputError(f"ground-truth window {gt.window_id!r} is not a test window")
    if not 1 <= N_pool <= len(window_ids):
        raise InvalidInputError(f"N_pool={N_pool} exceeds the {len(window_ids)} available windows")
    query_id = ":".join(map(str, gt.key())) if query_id is None else query_id
    rng = np.random.default_rng(_query_seed(seed, query_id, N_pool))
    others = [w for w in window_ids if w != gt.window_id]
    drawn = rng.choice(len(others), size=N_pool - 1, replace=False) if N_pool > 1 else []
    pool = sorted([gt.window_id] + [others[i] for i in drawn])
    candidates = [i for w in pool for i in index.window_membership.get(w, ())]
    gt_row = index.position(gt)
    return CandidatePool(str(query_id), pool, candidates, candidates.index(gt_row))


def gt_rank(scores, gt_pos):
    """One plus the number of candidates scoring strictly above the ground truth."""
    scores = np.asarray(scores, dtype=np.float64)
    return int(1 + np.count_nonzero(scores > scores[gt_pos]))


def top_k(scores, K):
    """Positions of the K best scores; ties go to the earlier position."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    K = min(K, n)
    if K < n:
        # partial selection, then pull in every score tied with the K-th one
        kth = np.partition(-scores, K - 1)[K - 1]
        cand = np.flatnonzero(-scores <= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((cand, -scores[cand]))
    return cand[order][:K]


def score_and_rank(query, pool, index, K):
    if K < 1:
        raise InvalidInputError("K must be >= 1")
    if not pool.candidate_spec_indices:
        raise InvalidInputError(f"empty candidate pool for query {pool.query_id!r}")
    rows = np.asarray(pool.candidate_spec_indices)
    scores = index.Z[rows] @ np.asarray(query, dtype=np.float64)
    best = top_k(scores, K)
    return RankedResult(pool.query_id, [(int(rows[i]), float(scores[i])) for i in best],
                        gt_rank(scores, pool.gt_index))


def random_rank(pool, K, seed=0):
    """Baseline ranking: a seeded random permutation of the candidates."""
    if not pool.candidate_spec_indices:
        raise InvalidInputError(f"empty candidate pool for query {pool.query_id!r}")
    rng = np.random.default_rng(_query_seed(seed + 1, pool.query_id))
    n = len(pool.candidate_spec_indices)
    perm = rng.permutation(n)
    # the permutation position acts as a strictly decreasing score
    scores = np.empty(n)
    scores[perm] = -np.arange(n, dtype=np.float64)
    best = top_k(scores, K)
    items = [(int(pool.candidate_spec_indices[i]), float(scores[i])) for i in best]
    return RankedResult(pool.query_id, items, gt_rank(scores, pool.gt_index))


def write_results(path, results, index):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for res in results:
            for rank, (row, score) in enumerate(res.items, start=1):
                s = index.specs[row]
                fh.write(json.dumps({"query_id": res.query_id, "rank": rank,
                                     "window_id": s.window_id, "a": s.a, "b": s.b,
                                     "score": score, "gt_rank": res.gt_rank},
                                    separators=(",", ":")) + "\n")


def read_results(path):
    """Group result rows by query: ``{query_id: {"gt_rank": r, "items": [rec, ...]}}``."""
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"results file not found: {path}")
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                q = out.setdefault(rec["query_id"], {"gt_rank": rec["gt_rank"], "items": []})
                q["items"].append(rec)
    for q in out.values():
        q["items"].sort(key=lambda r: r["rank"])
    return out
