import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import logsumexp

from segment_retrieval.core import Window
from segment_retrieval.encoder import (DualEncoder, FeatureCache, HashTextEmbedder,
                                       ProjectionHead, TrainConfig, batch_loss_and_grads,
                                       embed_text, encode_frames, infonce_loss, load_checkpoint,
                                       pool_segment, project_and_normalize, save_checkpoint,
                                       similarity_matrix, train)
from segment_retrieval.errors import (DegenerateEmbeddingError, IndexingError,
                                      InvalidInputError, TrainingFailure)
from segment_retrieval.segmentation import SegmentSpec

finite = st.floats(-20, 20, allow_nan=False)


# --- frames and pooling ----------------------------------------------------

def test_constant_window_features():
    H = encode_frames(np.full(300, 0.5))
    assert np.all(H[:, 0] == 0.5)
    for col in (1, 3, 4, 5, 7):
        assert np.allclose(H[:, col], 0.0)


def test_line_slope_column():
    s = 0.003
    H = encode_frames(s * np.arange(1024))
    assert np.allclose(H[15:-15, 4], s, atol=1e-12)
    assert np.allclose(H[1:, 1], s)


def test_random_window_shape():
    H = encode_frames(np.random.default_rng(0).random(1024))
    assert H.shape == (1024, 8) and np.all(np.isfinite(H))
    assert H[-1, 6] == 1.0


def test_rolling_stats_against_loop():
    x = np.random.default_rng(1).random(120)
    H = encode_frames(x)
    for t in (0, 7, 60, 119):
        w = x[max(0, t - 15):t + 16]
        assert H[t, 2] == pytest.approx(w.mean())
        assert H[t, 3] == pytest.approx(w.std())
        tt = np.arange(w.size)
        assert H[t, 4] == pytest.approx(np.polyfit(tt, w, 1)[0])
        r = x[max(0, t - 50):t + 51]
        assert H[t, 7] == pytest.approx(r.max() - r.min())


def test_pool_examples():
    H = np.random.default_rng(2).random((50, 8))
    assert np.array_equal(pool_segment(H, 7, 7), H[6])
    same = np.tile(np.arange(8.0), (50, 1))
    assert np.allclose(pool_segment(same, 3, 40), np.arange(8.0))
    E = np.eye(8)
    assert np.allclose(pool_segment(E, 1, 2), (E[0] + E[1]) / 2)
    with pytest.raises(InvalidInputError):
        pool_segment(H, 0, 3)
    with pytest.raises(InvalidInputError):
        pool_segment(H, 4, 51)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (20, 3), elements=finite), arrays(np.float64, (20, 3), elements=finite),
       finite, finite, st.integers(1, 20), st.integers(0, 19))
def test_pool_linearity(H1, H2, alpha, beta, a, extra):
    b = min(20, a + extra)
    lhs = pool_segment(alpha * H1 + beta * H2, a, b)
    rhs = alpha * pool_segment(H1, a, b) + beta * pool_segment(H2, a, b)
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_feature_cache_missing_window():
    cache = FeatureCache([Window("w", "s", "x", 0, np.random.random(100), True)])
    assert cache.pooled(SegmentSpec("w", 1, 50)).shape == (8,)
    with pytest.raises(IndexingError):
        cache.pooled(SegmentSpec("nope", 1, 50))


# --- text ------------------------------------------------------------------

def test_embed_text_examples(tmp_path):
    a = embed_text("smooth rising segment")
    assert np.array_equal(a, embed_text("smooth rising segment"))
    assert a.shape == (256,) and np.linalg.norm(a) == pytest.approx(1.0)
    r, f = embed_text("rising"), embed_text("falling")
    assert r @ f < 1.0
    vec = [0.25] * 256
    (tmp_path / "e.ndjson").write_text(json.dumps({"caption": "rising", "vector": vec}) + "\n")
    emb = HashTextEmbedder.from_file(tmp_path / "e.ndjson")
    assert emb("rising").tolist() == vec
    with pytest.raises(InvalidInputError):
        embed_text("   ")


def test_hash_embedding_is_bag_of_words():
    assert np.array_equal(embed_text("Rising, flat!"), embed_text("flat rising"))


# --- projection ------------------------------------------------------------

def test_identity_head():
    d = 5
    head = ProjectionHead(np.eye(d), np.zeros(d), np.eye(d), np.zeros(d))
    assert np.allclose(project_and_normalize([3.0, 4.0, 0, 0, 0], head), [0.6, 0.8, 0, 0, 0])


def test_zero_output_is_degenerate():
    head = ProjectionHead(np.eye(3), np.zeros(3), np.zeros((3, 3)), np.zeros(3))
    with pytest.raises(DegenerateEmbeddingError):
        project_and_normalize(np.ones(3), head)


@pytest.mark.parametrize("seed", range(10))
def test_projection_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    head = ProjectionHead.init(8, 16, 128, rng)
    v = rng.normal(size=8)
    # straightforward re-implementation with explicit loops
    hidden = [max(0.0, sum(head.W1[j, i] * v[i] for i in range(8)) + head.b1[j])
              for j in range(16)]
    out = [sum(head.W2[k, j] * hidden[j] for j in range(16)) + head.b2[k] for k in range(128)]
    norm = sum(o * o for o in out) ** 0.5
    z = project_and_normalize(v, head)
    assert np.max(np.abs(z - np.array(out) / norm)) < 1e-6
    assert abs(np.linalg.norm(z) - 1.0) < 1e-6


def test_glorot_init():
    head = ProjectionHead.init(8, 32, 128, np.random.default_rng(0))
    assert np.all(np.abs(head.W1) <= np.sqrt(6 / 40)) and np.all(head.b1 == 0)
    assert head.dims == (8, 32, 128)
    assert ProjectionHead.init(8).dims == (8, 8, 128)


# --- similarity and loss ---------------------------------------------------

def test_similarity_examples():
    z = np.zeros((1, 128))
    z[0, 0] = 1.0
    assert similarity_matrix(z, z)[0, 0] == pytest.approx(1 / 0.07)
    Q = np.linalg.qr(np.random.default_rng(0).normal(size=(6, 6)))[0]
    assert np.allclose(similarity_matrix(Q, Q, 1.0), np.eye(6))
    with pytest.raises(InvalidInputError):
        similarity_matrix(z, z, 0.0)
    assert TrainConfig().tau == 0.07


def test_loss_examples():
    assert infonce_loss([[3.7]])[0] == pytest.approx(0.0)
    for s in (-2.0, 0.0, 5.0):
        assert infonce_loss(np.full((2, 2), s))[0] == pytest.approx(np.log(2))
    with pytest.raises(InvalidInputError):
        infonce_loss(np.zeros((2, 3)))


def _fd(f, X, eps=1e-5):
    G = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        old = X[idx]
        X[idx] = old + eps
        up = f()
        X[idx] = old - eps
        dn = f()
        X[idx] = old
        G[idx] = (up - dn) / (2 * eps)
    return G


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradient_finite_differences(seed):
    Psi = np.random.default_rng(seed).normal(scale=2.0, size=(4, 4))
    _, G = infonce_loss(Psi)
    num = _fd(lambda: infonce_loss(Psi)[0], Psi)
    assert np.linalg.norm(G - num) / np.linalg.norm(num) < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6).flatmap(lambda b: arrays(np.float64, (b, b), elements=finite)), finite)
def test_loss_properties(Psi, c):
    loss, _ = infonce_loss(Psi)
    assert loss >= -1e-12
    assert loss == pytest.approx(infonce_loss(Psi.T)[0], abs=1e-9)
    # shifting one row leaves its row term unchanged
    shifted = Psi.copy()
    shifted[0] += c
    row = lambda M: logsumexp(M[0]) - M[0, 0]  # noqa: E731
    assert row(shifted) == pytest.approx(row(Psi), abs=1e-9)


def test_loss_near_zero_for_point_masses():
    assert infonce_loss(np.eye(5) * 200.0)[0] < 1e-12


def _small_model(seed):
    rng = np.random.default_rng(seed)
    seg = ProjectionHead.init(8, 6, 5, rng)
    txt = ProjectionHead.init(12, 7, 5, rng)
    seg.b1 += rng.normal(scale=0.1, size=6)
    txt.b2 += rng.normal(scale=0.1, size=5)
    return DualEncoder(seg, txt, rng.normal(size=8), rng.uniform(0.5, 2, 8),
                       rng.normal(scale=0.1, size=12)), rng


@pytest.mark.parametrize("seed", range(3))
def test_head_gradients_finite_differences(seed):
    model, rng = _small_model(seed)
    P = rng.normal(size=(4, 8))
    T = rng.normal(size=(4, 12))
    tau = 0.5
    _, grads = batch_loss_and_grads(model, P, T, tau)
    f = lambda: batch_loss_and_grads(model, P, T, tau)[0]  # noqa: E731
    for name, head in model.heads().items():
        for k, p in head.params().items():
            num = _fd(f, p)
            denom = max(np.linalg.norm(num), 1e-8)
            assert np.linalg.norm(grads[name][k] - num) / denom < 1e-4, (name, k)


# --- training --------------------------------------------------------------

def _split(records, n_val):
    return records[n_val:], records[:n_val]


def test_lr_zero_leaves_params(toy_pairs):
    windows, records = toy_pairs
    tr, va = _split(records, 40)
    cfg = TrainConfig.desk(learning_rate=0.0, epochs=3, segment_hidden=16, text_hidden=16)
    init = DualEncoder.init(cfg, np.random.default_rng(cfg.rng_seed))
    before = {h: {k: v.copy() for k, v in hd.params().items()} for h, hd in init.heads().items()}
    model, log = train(tr, va, windows, cfg)
    for h, head in model.heads().items():
        for k, v in head.params().items():
            assert np.array_equal(v, before[h][k])
    assert len({e["val_loss"] for e in log}) == 1
    assert len({e["val_acc1"] for e in log}) == 1


def test_adamw_first_step_closed_form(toy_pairs):
    # with no warmup and no clipping, the first step is lr * (g / (|g| + eps) + wd * W)
    windows, records = toy_pairs
    n = 64
    cfg = TrainConfig.desk(batch_size=n, epochs=1, warmup_steps=0, grad_clip_norm=0.0,
                           learning_rate=1e-3, weight_decay=0.1,
                           segment_hidden=16, text_hidden=16)
    tr = records[:n]
    model, _ = train(tr, [], windows, cfg)
    ref = DualEncoder.init(cfg, np.random.default_rng(cfg.rng_seed))
    ref.feature_mean, ref.feature_scale = model.feature_mean, model.feature_scale
    ref.text_mean = model.text_mean
    cache = FeatureCache(windows)
    P = np.stack([cache.pooled(r.spec) for r in tr])
    T = np.stack([embed_text(r.caption) for r in tr])
    _, grads = batch_loss_and_grads(ref, P, T, cfg.tau)
    for h, head in ref.heads().items():
        for k, p in head.params().items():
            g = grads[h][k]
            decay = cfg.weight_decay * p if k.startswith("W") else 0.0
            expected = p - cfg.learning_rate * (g / (np.abs(g) + cfg.eps) + decay)
            assert np.allclose(getattr(model.heads()[h], k), expected, rtol=0, atol=1e-12)


def test_training_improves_over_chance(toy_pairs):
    windows, records = toy_pairs
    tr, va = _split(records, 64)
    cfg = TrainConfig.desk(epochs=10)
    model, log = train(tr, va, windows, cfg)
    assert log[-1]["train_loss"] < log[0]["train_loss"]
    assert model.best_acc1 == max(e["val_acc1"] for e in log)
    assert model.best_acc1 > 5 / 64


def test_training_deterministic(toy_pairs):
    windows, records = toy_pairs
    tr, va = _split(records, 40)
    cfg = TrainConfig.desk(epochs=2, segment_hidden=16, text_hidden=16)
    m1, l1 = train(tr, va, windows, cfg)
    m2, l2 = train(tr, va, windows, cfg)
    assert l1 == l2
    assert np.array_equal(m1.segment_head.W1, m2.segment_head.W1)


def test_train_validation(toy_pairs):
    windows, records = toy_pairs
    with pytest.raises(InvalidInputError):
        train(records[:10], [], windows, TrainConfig.desk())
    with pytest.raises(InvalidInputError):
        train(records[:100], records[:5], windows, TrainConfig.desk())
    with pytest.raises(InvalidInputError):
        TrainConfig(tau=0)
    with pytest.raises(InvalidInputError):
        TrainConfig(batch_size=1)


def test_nan_loss_is_training_failure(toy_pairs):
    windows, records = toy_pairs
    cfg = TrainConfig.desk(epochs=1, segment_hidden=8, text_hidden=8)
    model = DualEncoder.init(cfg, np.random.default_rng(0))
    model.segment_head.W2[:] = np.nan
    with pytest.raises(TrainingFailure, match="epoch 1"):
        train(records[:100], [], windows, cfg, model=model)


def test_published_defaults():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.learning_rate, cfg.weight_decay, cfg.epochs) == \
        (512, 1e-4, 0.05, 100)
    assert (cfg.warmup_steps, cfg.grad_clip_norm) == (500, 1.0)


def test_checkpoint_roundtrip(tmp_path, toy_pairs):
    windows, records = toy_pairs
    tr, va = _split(records, 40)
    cfg = TrainConfig.desk(epochs=2, segment_hidden=16, text_hidden=16)
    model, log = train(tr, va, windows, cfg)
    save_checkpoint(tmp_path / "m.json", model, cfg, log)
    back, doc = load_checkpoint(tmp_path / "m.json")
    assert doc["config"] == dataclasses.asdict(cfg) | {"betas": list(cfg.betas)}
    assert back.best_epoch == model.best_epoch and doc["log"] == log
    cache = FeatureCache(windows)
    P = np.stack([cache.pooled(r.spec) for r in va])
    assert np.array_equal(back.embed_segments(P), model.embed_segments(P))
    caps = [r.caption for r in va]
    assert np.array_equal(back.embed_captions(caps), model.embed_captions(caps))
    assert np.allclose(np.linalg.norm(back.embed_segments(P), axis=1), 1.0, atol=1e-6)
