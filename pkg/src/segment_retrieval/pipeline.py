"""Pipeline stages behind the command-line interface.

Every stage reads the previous stage's files under ``cfg.out_dir`` and writes
its own, so stages can be run one at a time or chained with :func:`run_all`.

Output layout::

    windows/<split>/<subset>.ndjson   segments/<split>.ndjson   plots/<split>/*.svg
    pairs/<split>.ndjson              model/checkpoint.json     index/test.idx
    queries.ndjson                    results/<method>_pool<N>.ndjson
    judgments/<method>_pool<N>.ndjson metrics/<method>_pool<N>.json (+ _hist.csv)
    figures/*.png                     manifest/<stage>.json
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path

import numpy as np

from . import captioning, evaluation, retrieval
from .config import config_to_dict
from .core import read_subset, read_windows, sample_subset, write_windows
from .encoder import FeatureCache, HashTextEmbedder, load_checkpoint, save_checkpoint, train
from .errors import InvalidInputError
from .segmentation import SegmentSpec, read_segments, segment_window, write_segments

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")

__all__ = [
    "SPLITS",
    "read_split_lists",
    "run_windows",
    "run_segment",
    "run_caption",
    "run_train",
    "run_index",
    "run_query",
    "run_eval",
    "run_all",
    "load_split_windows",
]


def _manifest(cfg, stage, **extra):
    doc = config_to_dict(cfg)
    # paths differ between checkouts and would break byte-identical reruns
    doc.pop("data_dir", None)
    doc.pop("out_dir", None)
    path = cfg.out_path / "manifest" / f"{stage}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"stage": stage, "seed": cfg.seed, "config": doc, **extra},
                               indent=2, sort_keys=True) + "\n")


def _safe(name):
    return name.replace(":", "__").replace("/", "_")


# --- windows ---------------------------------------------------------------

def read_split_lists(cfg):
    """Subset names per split, from ``cfg.splits`` or ``<data_dir>/splits/<split>.txt``."""
    if cfg.splits:
        lists = {s: list(cfg.splits.get(s, [])) for s in SPLITS}
    else:
        lists = {}
        for s in SPLITS:
            path = cfg.data_path / "splits" / f"{s}.txt"
            if not path.exists():
                raise InvalidInputError(f"split list not found: {path}")
            lists[s] = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    seen = {}
    for split, names in lists.items():
        for name in names:
            if name in seen and seen[name] != split:
                raise InvalidInputError(
                    f"subset {name!r} appears in both {seen[name]!r} and {split!r} splits")
            seen[name] = split
        if len(set(names)) != len(names):
            raise InvalidInputError(f"duplicate subset names in the {split!r} split")
    if not any(lists.values()):
        raise InvalidInputError("all split lists are empty")
    return lists


def run_windows(cfg):
    if not cfg.data_path.is_dir():
        raise InvalidInputError(f"data directory not found: {cfg.data_path}")
    lists = read_split_lists(cfg)
    outputs = []
    for split in SPLITS:
        for name in lists[split]:
            windows = sample_subset(read_subset(cfg.data_path / name), cfg.sampling)
            path = cfg.out_path / "windows" / split / f"{name}.ndjson"
            write_windows(path, windows)
            outputs.append(path)
            logger.info("%s/%s: %d windows", split, name, len(windows))
    _manifest(cfg, "windows", subsets=lists)
    return outputs


def load_split_windows(cfg, split):
    directory = cfg.out_path / "windows" / split
    files = sorted(directory.glob("*.ndjson")) if directory.is_dir() else []
    windows = [w for f in files for w in read_windows(f)]
    return windows


# --- segmentation and captions ----------------------------------------------

def run_segment(cfg, splits=SPLITS):
    total = 0
    results_by_split = {}
    for split in splits:
        windows = load_split_windows(cfg, split)
        if not windows:
            continue
        results = [segment_window(w, cfg.segmentation) for w in windows]
        write_segments(cfg.out_path / "segments" / f"{split}.ndjson", results)
        if cfg.plot_svg:
            plot_dir = cfg.out_path / "plots" / split
            plot_dir.mkdir(parents=True, exist_ok=True)
            for w, res in zip(windows, results):
                svg = captioning.render_window_plot(w, res.captionable)
                (plot_dir / f"{_safe(w.window_id)}.svg").write_text(svg)
        results_by_split[split] = results
        total += len(windows)
    if total == 0:
        raise InvalidInputError(f"no windows found under {cfg.out_path / 'windows'}")
    _manifest(cfg, "segment")
    return results_by_split


def run_caption(cfg, splits=SPLITS, session=None):
    counts = {}
    for split in splits:
        seg_path = cfg.out_path / "segments" / f"{split}.ndjson"
        if not seg_path.exists():
            continue
        windows = {w.window_id: w for w in load_split_windows(cfg, split)}
        by_window = {}
        for spec in read_segments(seg_path, captionable_only=True):
            by_window.setdefault(spec.window_id, []).append(spec)
        missing = sorted(set(by_window) - set(windows))
        if missing:
            raise InvalidInputError(f"segments reference unknown windows: {missing[:3]}")
        jobs = [(windows[wid], by_window[wid]) for wid in sorted(by_window)]
        records = captioning.caption_windows(jobs, cfg.captioner, cfg.vlm, session=session)
        captioning.write_records(cfg.out_path / "pairs" / f"{split}.ndjson", records)
        counts[split] = len(records)
    if not counts:
        raise InvalidInputError(f"no segment files found under {cfg.out_path / 'segments'}")
    _manifest(cfg, "caption", counts=counts)
    return counts


# --- training ----------------------------------------------------------------

def _pairs(cfg, split):
    return captioning.read_records(cfg.out_path / "pairs" / f"{split}.ndjson")


def _select_training_pairs(cfg, records):
    records = sorted(records, key=lambda r: r.spec.key())
    if cfg.train_pairs is not None and len(records) > cfg.train_pairs:
        rng = np.random.default_rng([cfg.seed, 1])
        keep = np.sort(rng.choice(len(records), size=cfg.train_pairs, replace=False))
        records = [records[i] for i in keep]
    return records


def _windows_for(cfg, splits):
    return {w.window_id: w for s in splits for w in load_split_windows(cfg, s)}


def checkpoint_path(cfg):
    return cfg.out_path / "model" / "checkpoint.json"


def run_train(cfg, resume=False):
    """Train both heads; with ``resume`` an existing checkpoint for the same config is reused."""
    path = checkpoint_path(cfg)
    cfg_echo = dataclasses.asdict(cfg.training)
    if resume and path.exists():
        model, doc = load_checkpoint(path)
        if json.loads(json.dumps(doc.get("config"))) == json.loads(json.dumps(cfg_echo)):
            logger.info("reusing checkpoint %s", path)
            return model, doc["log"]
        logger.warning("checkpoint config differs from the current config; retraining")
    train_records = _select_training_pairs(cfg, _pairs(cfg, "train"))
    val_records = sorted(_pairs(cfg, "val"), key=lambda r: r.spec.key())
    # mix series across validation batches instead of keeping each window's segments together
    order = np.random.default_rng([cfg.seed, 2]).permutation(len(val_records))
    val_records = [val_records[i] for i in order]
    windows = _windows_for(cfg, ("train", "val"))
    start = time.perf_counter()
    model, log = train(train_records, val_records, windows, cfg.training)
    logger.info("trained on %d pairs in %.1f s; best val Acc@1 %.3f at epoch %d",
                len(train_records), time.perf_counter() - start, model.best_acc1,
                model.best_epoch)
    save_checkpoint(path, model, cfg.training, log)
    _manifest(cfg, "train", n_train=len(train_records), n_val=len(val_records),
              best_epoch=model.best_epoch, best_acc1=model.best_acc1)
    return model, log


# --- index, query, eval ------------------------------------------------------

def index_path(cfg):
    return cfg.out_path / "index" / "test.idx"


def run_index(cfg):
    model, _ = load_checkpoint(checkpoint_path(cfg))
    specs = [r.spec for r in _pairs(cfg, "test")]
    cache = FeatureCache(_windows_for(cfg, ("test",)))
    index = retrieval.build_index(specs, model, cache)
    retrieval.save_index(index_path(cfg), index)
    _manifest(cfg, "index", n_segments=len(index))
    return index


def results_path(cfg, method, pool):
    return cfg.out_path / "results" / f"{method}_pool{pool}.ndjson"


def run_query(cfg, pool_sizes=None, methods=None, K=None):
    pool_sizes = tuple(pool_sizes or cfg.eval.pool_sizes)
    methods = tuple(methods or cfg.eval.methods)
    K = K or cfg.eval.K
    index = retrieval.load_index(index_path(cfg))
    model, _ = load_checkpoint(checkpoint_path(cfg))
    test_windows = sorted({w.window_id for w in load_split_windows(cfg, "test")})
    records = _pairs(cfg, "test")
    queries = evaluation.sample_queries(records, min(cfg.eval.N_q, len(records)), cfg.seed)
    evaluation.write_queries(cfg.out_path / "queries.ndjson", queries)
    U = model.embed_captions([q.caption for q in queries])
    written = []
    for pool_size in pool_sizes:
        pools = [retrieval.make_pool(q.gt, test_windows, pool_size, index, cfg.seed, q.query_id)
                 for q in queries]
        for method in methods:
            if method == "lastr":
                results = [retrieval.score_and_rank(u, p, index, K) for u, p in zip(U, pools)]
            else:
                results = [retrieval.random_rank(p, K, cfg.seed) for p in pools]
            path = results_path(cfg, method, pool_size)
            retrieval.write_results(path, results, index)
            written.append(path)
    _manifest(cfg, "query", pool_sizes=list(pool_sizes), methods=list(methods), K=K,
              n_queries=len(queries))
    return written


def _sentence_embedder(cfg):
    if cfg.eval.sentence_embeddings:
        return evaluation.PrecomputedEmbedder.from_file(cfg.eval.sentence_embeddings)
    return HashTextEmbedder()


def evaluate_results(cfg, method, pool_size, queries, captions, windows=None):
    """Metrics for one results file; writes judgments, metrics JSON, histogram CSV and figures."""
    rpath = results_path(cfg, method, pool_size)
    results = retrieval.read_results(rpath)
    qids = [q.query_id for q in queries]
    missing = [q for q in qids if q not in results]
    if missing:
        raise InvalidInputError(f"{rpath} lacks results for queries {missing[:3]}")
    ks = sorted(cfg.eval.ks)
    K = max(ks)
    ranks = [results[q]["gt_rank"] for q in qids]
    embedder = _sentence_embedder(cfg)

    def retrieved(q):
        items = results[q.query_id]["items"][:K]
        return [captions[(r["window_id"], r["a"], r["b"])] for r in items]

    tag = f"{method}_pool{pool_size}"
    metrics = {"pool": pool_size, "method": method, "n_queries": len(queries),
               "seed": cfg.seed, "map": evaluation.mean_ap(ranks)}
    for k in ks:
        metrics[f"recall@{k}"] = evaluation.recall_at_k(ranks, k)

    short = [q for q in qids if len(results[q]["items"]) < K]
    if short:
        # caption-side metrics average over exactly K retrieved segments
        logger.warning("%s: %d queries have fewer than %d candidates; caption-side "
                       "metrics left empty", tag, len(short), K)
        metrics.update({f"sbert@{K}": None, f"vlm_score@{K}": None,
                        f"vlm_precision@{K}": None})
        evaluation.write_metrics(cfg.out_path / "metrics" / f"{tag}.json", metrics)
        return metrics

    metrics[f"sbert@{K}"] = float(np.mean([
        evaluation.mean_sbert_at_k(q.caption, retrieved(q), embedder) for q in queries]))
    if cfg.eval.judgments_dir:
        judgments = evaluation.read_judgments(Path(cfg.eval.judgments_dir) / f"{tag}.ndjson")
    else:
        judgments = [j for q in queries
                     for j in evaluation.attribute_judge(q.query_id, q.caption, retrieved(q))]
        evaluation.write_judgments(cfg.out_path / "judgments" / f"{tag}.ndjson", judgments)
    vlm_score, vlm_prec = evaluation.vlm_aggregate(judgments, len(queries), K, qids)
    metrics[f"vlm_score@{K}"] = vlm_score
    metrics[f"vlm_precision@{K}"] = vlm_prec
    evaluation.write_metrics(cfg.out_path / "metrics" / f"{tag}.json", metrics)

    means = evaluation.per_query_means(judgments, K)
    edges, counts = evaluation.score_histogram(list(means.values()), cfg.eval.histogram_bins)
    evaluation.write_histogram_csv(cfg.out_path / "metrics" / f"{tag}_hist.csv", edges, counts)
    if cfg.eval.figures:
        from . import plotting

        fig_dir = cfg.out_path / "figures"
        plotting.plot_score_histogram(edges, counts, fig_dir / f"{tag}_hist.png",
                                      title=f"{method}, pool {pool_size}")
        if windows:
            examples = []
            for q in queries[:4]:
                top = results[q.query_id]["items"][0]
                hit = SegmentSpec(top["window_id"], top["a"], top["b"])
                examples.append((q.caption, windows[q.gt.window_id], q.gt,
                                 windows[hit.window_id], hit))
            plotting.plot_rank1_examples(examples, fig_dir / f"{tag}_rank1.png")
    return metrics


def run_eval(cfg, pool_sizes=None, methods=None):
    pool_sizes = tuple(pool_sizes or cfg.eval.pool_sizes)
    methods = tuple(methods or cfg.eval.methods)
    queries = evaluation.read_queries(cfg.out_path / "queries.ndjson")
    captions = {r.spec.key(): r.caption for r in _pairs(cfg, "test")}
    windows = _windows_for(cfg, ("test",)) if cfg.eval.figures else None
    out = []
    for pool_size in pool_sizes:
        for method in methods:
            out.append(evaluate_results(cfg, method, pool_size, queries, captions, windows))
    _manifest(cfg, "eval", pool_sizes=list(pool_sizes), methods=list(methods))
    return out


def run_all(cfg):
    run_windows(cfg)
    run_segment(cfg)
    run_caption(cfg)
    run_train(cfg)
    run_index(cfg)
    run_query(cfg)
    return run_eval(cfg)
