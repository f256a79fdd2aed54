import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segment_retrieval.encoder import DualEncoder, FeatureCache, TrainConfig
from segment_retrieval.errors import IndexingError, InvalidInputError
from segment_retrieval.retrieval import (CandidatePool, EmbeddingIndex, build_index, gt_rank,
                                         load_index, make_pool, random_rank, read_results,
                                         save_index, score_and_rank, top_k, write_results)
from segment_retrieval.segmentation import SegmentSpec


@pytest.fixture(scope="module")
def built(toy_pairs):
    windows, records = toy_pairs
    cfg = TrainConfig.desk(segment_hidden=16, text_hidden=16)
    model = DualEncoder.init(cfg, np.random.default_rng(0))
    cache = FeatureCache(windows)
    index = build_index([r.spec for r in records], model, cache)
    return windows, records, model, cache, index


def _brute(scores, K):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order[:K]


# --- index ------------------------------------------------------------------

def test_index_rows_sorted_and_unit(built):
    _, records, _, _, index = built
    keys = [(s.window_id, s.a, s.b) for s in index.specs]
    assert keys == sorted(keys) and len(set(keys)) == len(keys) == len(records)
    assert index.Z.shape == (len(records), 128)
    assert np.allclose(np.linalg.norm(index.Z, axis=1), 1.0, atol=1e-6)


def test_single_spec_index(built):
    _, records, model, cache, _ = built
    idx = build_index([records[0].spec], model, cache)
    assert idx.Z.shape == (1, 128)
    assert np.linalg.norm(idx.Z[0]) == pytest.approx(1.0)


def test_duplicates_dropped_with_warning(built, caplog):
    _, records, model, cache, _ = built
    specs = [records[0].spec, records[1].spec, records[0].spec]
    with caplog.at_level(logging.WARNING):
        idx = build_index(specs, model, cache)
    assert len(idx) == 2 and "duplicate" in caplog.text


def test_missing_window_names_spec(built):
    _, _, model, cache, _ = built
    with pytest.raises(IndexingError, match="ghost"):
        build_index([SegmentSpec("ghost", 1, 80)], model, cache)


def test_index_file_roundtrip_and_determinism(built, tmp_path):
    windows, records, model, _, index = built
    save_index(tmp_path / "a.idx", index)
    again = build_index([r.spec for r in records], model, FeatureCache(windows))
    save_index(tmp_path / "b.idx", again)
    assert (tmp_path / "a.idx").read_bytes() == (tmp_path / "b.idx").read_bytes()
    raw = (tmp_path / "a.idx").read_bytes()
    assert raw[:8] == b"SEGIDX01" and len(raw) == 20 + 4 * index.Z.size
    back = load_index(tmp_path / "a.idx")
    assert back.specs == index.specs
    assert np.array_equal(back.Z, index.Z.astype(np.float32).astype(np.float64))


def test_load_index_errors(tmp_path):
    with pytest.raises(InvalidInputError):
        load_index(tmp_path / "missing.idx")
    (tmp_path / "bad.idx").write_bytes(b"garbage" * 4)
    with pytest.raises(InvalidInputError):
        load_index(tmp_path / "bad.idx")


# --- pools ------------------------------------------------------------------

def test_pool_full_and_single(built):
    windows, records, _, _, index = built
    wids = [w.window_id for w in windows]
    gt = records[5].spec
    full = make_pool(gt, wids, len(wids), index)
    assert full.candidate_spec_indices == list(range(len(index)))
    one = make_pool(gt, wids, 1, index)
    assert one.window_ids == [gt.window_id]
    assert [index.specs[i].window_id for i in one.candidate_spec_indices] == \
        [gt.window_id] * len(one.candidate_spec_indices)
    assert index.specs[one.candidate_spec_indices[one.gt_index]] == gt


@pytest.mark.parametrize("n_pool", [2, 10, 37])
def test_pool_invariants(built, n_pool):
    windows, records, _, _, index = built
    wids = [w.window_id for w in windows]
    for rec in records[:30]:
        pool = make_pool(rec.spec, wids, n_pool, index, seed=3, query_id=str(rec.spec))
        assert len(set(pool.window_ids)) == n_pool
        assert rec.spec.window_id in pool.window_ids
        assert index.specs[pool.candidate_spec_indices[pool.gt_index]] == rec.spec
        again = make_pool(rec.spec, wids, n_pool, index, seed=3, query_id=str(rec.spec))
        assert again == pool


def test_pool_is_uniform(built):
    # every non-gt window should be drawn about equally often
    windows, records, _, _, index = built
    wids = [w.window_id for w in windows]
    gt = records[0].spec
    counts = dict.fromkeys(wids, 0)
    trials = 3000
    for q in range(trials):
        for w in make_pool(gt, wids, 6, index, query_id=f"q{q}").window_ids:
            counts[w] += 1
    others = np.array([c for w, c in counts.items() if w != gt.window_id])
    expected = trials * 5 / (len(wids) - 1)
    assert counts[gt.window_id] == trials
    assert np.all(np.abs(others - expected) < 5 * np.sqrt(expected))


def test_pool_errors(built):
    windows, records, _, _, index = built
    wids = [w.window_id for w in windows]
    with pytest.raises(InvalidInputError):
        make_pool(records[0].spec, wids, len(wids) + 1, index)
    with pytest.raises(InvalidInputError):
        make_pool(records[0].spec, wids[1:], 3, index)


# --- ranking ----------------------------------------------------------------

def test_gt_rank_tie_examples():
    assert gt_rank([0.9, 0.9, 0.5], 0) == 1
    assert gt_rank([0.9, 0.9, 0.5], 1) == 1
    assert gt_rank([0.9, 0.9, 0.5], 2) == 3


def test_top_k_ties_by_position():
    assert top_k([0.5, 0.9, 0.9, 0.1, 0.9], 2).tolist() == [1, 2]
    assert top_k([0.5, 0.9, 0.9, 0.1, 0.9], 10).tolist() == [1, 2, 4, 0, 3]


def test_top_k_matches_full_sort():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 300))
        # coarse values force plenty of ties
        scores = np.round(rng.normal(size=n), int(rng.integers(0, 3)))
        K = int(rng.integers(1, 20))
        assert top_k(scores, K).tolist() == _brute(list(scores), K)


def _pool_of(n, gt):
    return CandidatePool("q", ["w"], list(range(n)), gt)


def test_score_and_rank_against_oracle():
    rng = np.random.default_rng(1)
    for trial in range(50):
        Z = rng.normal(size=(200, 16))
        Z /= np.linalg.norm(Z, axis=1, keepdims=True)
        index = EmbeddingIndex([SegmentSpec("w", i + 1, i + 2) for i in range(200)], Z)
        q = rng.normal(size=16)
        q /= np.linalg.norm(q)
        gt = int(rng.integers(200))
        res = score_and_rank(q, _pool_of(200, gt), index, 10)
        scores = [float(Z[i] @ q) for i in range(200)]
        assert [r for r, _ in res.items] == _brute(scores, 10)
        desc = sorted(scores, reverse=True)
        assert res.gt_rank == 1 + sum(s > scores[gt] for s in desc)
        assert all(x[1] >= y[1] for x, y in zip(res.items, res.items[1:]))


def test_own_positive_single_candidate():
    z = np.ones(4) / 2
    index = EmbeddingIndex([SegmentSpec("w", 1, 9)], z[None])
    assert score_and_rank(z, _pool_of(1, 0), index, 5).gt_rank == 1


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=40), st.data())
def test_gt_rank_permutation_invariant(scores, data):
    gt = data.draw(st.integers(0, len(scores) - 1))
    perm = data.draw(st.permutations(range(len(scores))))
    permuted = [scores[i] for i in perm]
    r = gt_rank(scores, gt)
    assert r == gt_rank(permuted, perm.index(gt))
    assert 1 <= r <= len(scores)


def test_rank_errors():
    index = EmbeddingIndex([SegmentSpec("w", 1, 9)], np.ones((1, 2)))
    with pytest.raises(InvalidInputError):
        score_and_rank(np.ones(2), _pool_of(0, 0), index, 1)
    with pytest.raises(InvalidInputError):
        score_and_rank(np.ones(2), _pool_of(1, 0), index, 0)


def test_random_rank_is_a_seeded_permutation():
    pool = CandidatePool("q7", ["w"], list(range(50, 80)), 4)
    a = random_rank(pool, 30, seed=2)
    b = random_rank(pool, 30, seed=2)
    assert a == b
    assert sorted(r for r, _ in a.items) == list(range(50, 80))
    gt_pos = [r for r, _ in a.items].index(54) + 1
    assert a.gt_rank == gt_pos
    assert random_rank(pool, 30, seed=3).items != a.items


def test_random_rank_gt_uniform():
    ranks = [random_rank(CandidatePool(f"q{i}", ["w"], list(range(10)), 0), 1).gt_rank
             for i in range(5000)]
    counts = np.bincount(ranks, minlength=11)[1:]
    assert np.all(np.abs(counts - 500) < 5 * np.sqrt(500))


def test_results_roundtrip(built, tmp_path):
    _, records, model, _, index = built
    q = model.embed_captions([records[0].caption])[0]
    pool = CandidatePool("q0", [], list(range(len(index))), index.position(records[0].spec))
    res = score_and_rank(q, pool, index, 5)
    write_results(tmp_path / "r.ndjson", [res], index)
    back = read_results(tmp_path / "r.ndjson")
    assert back["q0"]["gt_rank"] == res.gt_rank
    assert [r["rank"] for r in back["q0"]["items"]] == [1, 2, 3, 4, 5]
    first = back["q0"]["items"][0]
    assert (first["window_id"], first["a"], first["b"]) == index.specs[res.items[0][0]].key()


def test_random_rank_map_matches_harmonic_expectation():
    # a uniform gt rank over n candidates has E[1/r] = H_n / n
    n, trials = 350, 4000
    recip = [1 / random_rank(CandidatePool(f"q{i}", ["w"], list(range(n)), 17), 1).gt_rank
             for i in range(trials)]
    expected = sum(1 / k for k in range(1, n + 1)) / n
    sd = np.sqrt((np.pi ** 2 / 6 / n - expected ** 2) / trials)
    assert abs(np.mean(recip) - expected) < 4 * sd
