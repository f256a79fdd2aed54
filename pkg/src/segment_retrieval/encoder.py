"""Frame features, interval pooling, text hashing, projection heads and contrastive training.

Training is plain numpy: both projection heads are two-layer ReLU MLPs whose
gradients are written out by hand, the loss is the symmetric InfoNCE over a
temperature-scaled cosine matrix, and the optimizer is AdamW with linear
warmup and global-norm clipping.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter1d, minimum_filter1d
from scipy.special import logsumexp

from .errors import DegenerateEmbeddingError, IndexingError, InvalidInputError, TrainingFailure

logger = logging.getLogger(__name__)

__all__ = [
    "FRAME_DIM",
    "TEXT_DIM",
    "EMBED_DIM",
    "encode_frames",
    "pool_segment",
    "HashTextEmbedder",
    "embed_text",
    "ProjectionHead",
    "project_and_normalize",
    "l2_normalize",
    "similarity_matrix",
    "infonce_loss",
    "TrainConfig",
    "DualEncoder",
    "FeatureCache",
    "segment_features_matrix",
    "batch_acc1",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

FRAME_DIM = 8
TEXT_DIM = 256
EMBED_DIM = 128


# --- frame features --------------------------------------------------------

def _truncated_windows(x, width):
    """``(L, width)`` view of centered windows padded with NaN at the edges."""
    half = width // 2
    padded = np.concatenate([np.full(half, np.nan), x, np.full(half, np.nan)])
    return np.lib.stride_tricks.sliding_window_view(padded, width)


def _rolling_slope(x, width):
    win = _truncated_windows(x, width)
    t = np.arange(width, dtype=np.float64)
    mask = ~np.isnan(win)
    n = mask.sum(axis=1)
    tm = np.where(mask, t, 0.0)
    xm = np.where(mask, win, 0.0)
    t_bar = tm.sum(axis=1) / n
    x_bar = xm.sum(axis=1) / n
    dt = np.where(mask, t - t_bar[:, None], 0.0)
    dx = np.where(mask, win - x_bar[:, None], 0.0)
    return (dt * dx).sum(axis=1) / (dt * dt).sum(axis=1)


def encode_frames(window):
    """Reference frame featurizer: ``(L, 8)`` matrix whose row ``t`` describes frame ``t``.

    Columns: value, first difference, rolling mean (31), rolling std (31),
    local OLS slope (31), distance to the window mean, position ``t / L``,
    rolling range (101).  Windows near the edges are truncated.
    """
    x = np.asarray(getattr(window, "values", window), dtype=np.float64)
    L = x.size
    if L < 2:
        raise InvalidInputError("window needs at least 2 frames")
    win = _truncated_windows(x, 31)
    rmean = np.nanmean(win, axis=1)
    rstd = np.sqrt(np.nanmean((win - rmean[:, None]) ** 2, axis=1))
    H = np.empty((L, FRAME_DIM))
    H[:, 0] = x
    H[0, 1] = 0.0
    H[1:, 1] = np.diff(x)
    H[:, 2] = rmean
    H[:, 3] = rstd
    H[:, 4] = _rolling_slope(x, 31)
    H[:, 5] = x - x.mean()
    H[:, 6] = np.arange(1, L + 1) / L
    # max/min over a truncated window equal those with edge replication
    H[:, 7] = (maximum_filter1d(x, 101, mode="nearest")
               - minimum_filter1d(x, 101, mode="nearest"))
    return H


def pool_segment(H, a, b):
    """Mean of rows ``a..b`` (1-based, inclusive) of the frame matrix."""
    H = np.asarray(H, dtype=np.float64)
    if not (1 <= a <= b <= H.shape[0]):
        raise InvalidInputError(f"interval ({a}, {b}) outside 1..{H.shape[0]}")
    return H[a - 1:b].mean(axis=0)


# --- text ------------------------------------------------------------------

_TOKEN = re.compile(r"[a-z0-9]+")


def _hash(token):
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(),
                          "little")


class HashTextEmbedder:
    """Signed feature hashing of lowercase word tokens, l2-normalized.

    ``precomputed`` maps caption -> vector and takes priority; it can be
    loaded from NDJSON records ``{caption, vector}`` with :meth:`from_file`.
    """

    def __init__(self, dim=TEXT_DIM, precomputed=None):
        self.dim = dim
        self.precomputed = dict(precomputed or {})
        self._cache = {}

    @classmethod
    def from_file(cls, path, dim=TEXT_DIM):
        path = Path(path)
        if not path.exists():
            raise InvalidInputError(f"embedding file not found: {path}")
        table = {}
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    table[rec["caption"]] = np.asarray(rec["vector"], dtype=np.float64)
        return cls(dim, table)

    def __call__(self, caption):
        if not isinstance(caption, str) or not caption.strip():
            raise InvalidInputError("caption must be a non-empty string")
        if caption in self.precomputed:
            return self.precomputed[caption].copy()
        hit = self._cache.get(caption)
        if hit is None:
            v = np.zeros(self.dim)
            for tok in _TOKEN.findall(caption.lower()):
                h = _hash(tok)
                v[h % self.dim] += 1.0 if (h >> 32) & 1 else -1.0
            norm = np.linalg.norm(v)
            hit = v / norm if norm > 0 else v
            self._cache[caption] = hit
        return hit.copy()


_DEFAULT_EMBEDDER = HashTextEmbedder()


def embed_text(caption, embedder=None):
    return (embedder or _DEFAULT_EMBEDDER)(caption)


# --- projection heads ------------------------------------------------------

def l2_normalize(Y, eps=0.0):
    Y = np.asarray(Y, dtype=np.float64)
    norms = np.linalg.norm(Y, axis=-1, keepdims=True)
    if np.any(norms <= eps):
        raise DegenerateEmbeddingError("projection output is the zero vector")
    return Y / norms


@dataclass
class ProjectionHead:
    """``W2 relu(W1 v + b1) + b2``; weights are stored as ``(out, in)`` matrices."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    PARAMS = ("W1", "b1", "W2", "b2")

    @classmethod
    def init(cls, in_dim, hidden_dim=None, out_dim=EMBED_DIM, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden_dim = hidden_dim or in_dim

        def glorot(fan_out, fan_in):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=(fan_out, fan_in))

        return cls(glorot(hidden_dim, in_dim), np.zeros(hidden_dim),
                   glorot(out_dim, hidden_dim), np.zeros(out_dim))

    @property
    def dims(self):
        return (self.W1.shape[1], self.W1.shape[0], self.W2.shape[0])

    def params(self):
        return {k: getattr(self, k) for k in self.PARAMS}

    def copy(self):
        return ProjectionHead(*(getattr(self, k).copy() for k in self.PARAMS))

    def forward(self, V):
        """Return the raw output and the cache needed by :meth:`backward`."""
        V = np.atleast_2d(np.asarray(V, dtype=np.float64))
        if V.shape[1] != self.W1.shape[1]:
            raise InvalidInputError(f"input dim {V.shape[1]} != head input {self.W1.shape[1]}")
        pre = V @ self.W1.T + self.b1
        hid = np.maximum(pre, 0.0)
        return hid @ self.W2.T + self.b2, (V, pre, hid)

    def backward(self, dY, cache):
        V, pre, hid = cache
        dhid = dY @ self.W2
        dpre = dhid * (pre > 0)
        return {"W1": dpre.T @ V, "b1": dpre.sum(axis=0),
                "W2": dY.T @ hid, "b2": dY.sum(axis=0)}


def project_and_normalize(v, head):
    """Project one vector (or a batch of rows) and scale to unit l2 norm."""
    v = np.asarray(v, dtype=np.float64)
    Y, _ = head.forward(v)
    out = l2_normalize(Y)
    return out[0] if v.ndim == 1 else out


def _normalize_backward(Y, Z, dZ):
    norms = np.linalg.norm(Y, axis=1, keepdims=True)
    return (dZ - Z * np.sum(Z * dZ, axis=1, keepdims=True)) / norms


# --- loss ------------------------------------------------------------------

def similarity_matrix(Z, U, tau=0.07):
    if not tau > 0:
        raise InvalidInputError(f"tau must be > 0, got {tau}")
    return np.asarray(Z, dtype=np.float64) @ np.asarray(U, dtype=np.float64).T / tau


def _softmax(S, axis):
    return np.exp(S - logsumexp(S, axis=axis, keepdims=True))


def infonce_loss(Psi):
    """Symmetric InfoNCE with the diagonal as positives; returns ``(loss, dLoss/dPsi)``."""
    Psi = np.asarray(Psi, dtype=np.float64)
    if Psi.ndim != 2 or Psi.shape[0] != Psi.shape[1] or Psi.shape[0] < 1:
        raise InvalidInputError(f"expected a non-empty square matrix, got shape {Psi.shape}")
    B = Psi.shape[0]
    diag = np.diag(Psi)
    row = np.mean(logsumexp(Psi, axis=1) - diag)
    col = np.mean(logsumexp(Psi, axis=0) - diag)
    eye = np.eye(B)
    grad = (_softmax(Psi, 1) - eye + _softmax(Psi, 0) - eye) / (2 * B)
    return 0.5 * (row + col), grad


# --- training --------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.07
    batch_size: int = 512
    epochs: int = 100
    learning_rate: float = 1e-4
    weight_decay: float = 0.05
    warmup_steps: int = 500
    grad_clip_norm: float = 1.0
    rng_seed: int = 0
    segment_hidden: int | None = None
    text_hidden: int | None = None
    embed_dim: int = EMBED_DIM
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    standardize: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidInputError("tau must be > 0")
        if self.batch_size < 2:
            raise InvalidInputError("batch_size must be >= 2")
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise InvalidInputError("learning_rate and weight_decay must be >= 0")

    @classmethod
    def desk(cls, **overrides):
        """Small-scale settings used by the offline experiment."""
        base = dict(batch_size=64, epochs=30, learning_rate=1e-3, warmup_steps=20,
                    weight_decay=1e-4, segment_hidden=256, text_hidden=256)
        base.update(overrides)
        return cls(**base)


@dataclass
class DualEncoder:
    """Both projection heads plus the standardization applied to pooled segment features."""

    segment_head: ProjectionHead
    text_head: ProjectionHead
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    text_mean: np.ndarray = None
    text_scale: np.ndarray = None
    text_embedder: HashTextEmbedder = field(default_factory=lambda: _DEFAULT_EMBEDDER)

    def __post_init__(self):
        dim = self.text_head.W1.shape[1]
        if self.text_mean is None:
            self.text_mean = np.zeros(dim)
        if self.text_scale is None:
            self.text_scale = np.ones(dim)

    @classmethod
    def init(cls, cfg, rng, seg_dim=FRAME_DIM, text_dim=TEXT_DIM):
        seg = ProjectionHead.init(seg_dim, cfg.segment_hidden, cfg.embed_dim, rng)
        txt = ProjectionHead.init(text_dim, cfg.text_hidden, cfg.embed_dim, rng)
        return cls(seg, txt, np.zeros(seg_dim), np.ones(seg_dim))

    def scale_segments(self, P):
        return (np.atleast_2d(P) - self.feature_mean) / self.feature_scale

    def scale_text(self, T):
        return (np.atleast_2d(T) - self.text_mean) / self.text_scale

    def embed_segments(self, pooled):
        return project_and_normalize(self.scale_segments(pooled), self.segment_head)

    def embed_captions(self, captions):
        T = np.stack([self.text_embedder(c) for c in captions])
        return project_and_normalize(self.scale_text(T), self.text_head)

    def heads(self):
        return {"segment": self.segment_head, "text": self.text_head}


class FeatureCache:
    """Frame features computed on demand and memoized by window id."""

    def __init__(self, windows, encoder=encode_frames):
        self.windows = windows if isinstance(windows, dict) else {w.window_id: w for w in windows}
        self.encoder = encoder
        self._frames = {}

    def frames(self, window_id):
        H = self._frames.get(window_id)
        if H is None:
            if window_id not in self.windows:
                raise IndexingError(f"window {window_id!r} is not available")
            H = np.asarray(self.encoder(self.windows[window_id]), dtype=np.float64)
            if H.ndim != 2 or not np.all(np.isfinite(H)):
                raise InvalidInputError(f"encoder returned invalid features for {window_id!r}")
            self._frames[window_id] = H
        return H

    def pooled(self, spec):
        try:
            return pool_segment(self.frames(spec.window_id), spec.a, spec.b)
        except IndexingError:
            raise IndexingError(f"segment {spec.key()} references missing window "
                                f"{spec.window_id!r}") from None


def segment_features_matrix(specs, cache):
    return np.stack([cache.pooled(s) for s in specs]) if specs else np.zeros((0, FRAME_DIM))


def _forward_batch(model, P, T, tau):
    Ys, cs = model.segment_head.forward(model.scale_segments(P))
    Yt, ct = model.text_head.forward(model.scale_text(T))
    Z, U = l2_normalize(Ys), l2_normalize(Yt)
    Psi = similarity_matrix(Z, U, tau)
    return Psi, (Ys, cs, Yt, ct, Z, U)


def batch_loss_and_grads(model, P, T, tau):
    """Loss of one batch and gradients for every head parameter."""
    Psi, (Ys, cs, Yt, ct, Z, U) = _forward_batch(model, P, T, tau)
    loss, G = infonce_loss(Psi)
    dZ = G @ U / tau
    dU = G.T @ Z / tau
    gs = model.segment_head.backward(_normalize_backward(Ys, Z, dZ), cs)
    gt = model.text_head.backward(_normalize_backward(Yt, U, dU), ct)
    return loss, {"segment": gs, "text": gt}


def batch_acc1(Psi):
    """Fraction of rows whose argmax (lowest index on ties) is the diagonal."""
    return float(np.mean(np.argmax(Psi, axis=1) == np.arange(Psi.shape[0])))


def _evaluate(model, P, T, cfg):
    """Validation Acc@1 and loss over consecutive batches of ``cfg.batch_size``."""
    n = P.shape[0]
    if n == 0:
        return float("nan"), float("nan")
    correct, loss_sum = 0.0, 0.0
    for start in range(0, n, cfg.batch_size):
        sl = slice(start, min(start + cfg.batch_size, n))
        Psi, _ = _forward_batch(model, P[sl], T[sl], cfg.tau)
        b = Psi.shape[0]
        correct += batch_acc1(Psi) * b
        loss_sum += infonce_loss(Psi)[0] * b
    return correct / n, loss_sum / n


class _AdamW:
    def __init__(self, model, cfg):
        self.cfg = cfg
        self.step_count = 0
        self.m = {h: {k: np.zeros_like(v) for k, v in head.params().items()}
                  for h, head in model.heads().items()}
        self.v = {h: {k: np.zeros_like(v) for k, v in head.params().items()}
                  for h, head in model.heads().items()}

    def lr(self):
        cfg = self.cfg
        if cfg.warmup_steps <= 0:
            return cfg.learning_rate
        return cfg.learning_rate * min(1.0, self.step_count / cfg.warmup_steps)

    def step(self, model, grads):
        cfg = self.cfg
        self.step_count += 1
        total = np.sqrt(sum(float(np.sum(g * g)) for hg in grads.values() for g in hg.values()))
        clip = 1.0
        if cfg.grad_clip_norm and total > cfg.grad_clip_norm:
            clip = cfg.grad_clip_norm / total
        lr = self.lr()
        b1, b2 = cfg.betas
        c1 = 1 - b1 ** self.step_count
        c2 = 1 - b2 ** self.step_count
        for h, head in model.heads().items():
            for k, p in head.params().items():
                g = grads[h][k] * clip
                m = self.m[h][k]
                v = self.v[h][k]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
                if k.startswith("W"):
                    update = update + cfg.weight_decay * p
                p -= lr * update
        return total


def _text_matrix(records, embedder):
    return np.stack([embedder(r.caption) for r in records])


def train(train_records, val_records, windows, cfg=None, encoder=encode_frames,
          text_embedder=None, model=None):
    """Fit both heads with symmetric InfoNCE; keep the epoch with the best validation Acc@1.

    Returns ``(model, log)`` where ``log`` holds one entry per epoch with
    ``train_loss`` (mean over that epoch's shuffled batches), ``val_loss`` and
    ``val_acc1`` (fixed consecutive validation batches).
    """
    cfg = cfg or TrainConfig()
    train_records = list(train_records)
    val_records = list(val_records)
    if len(train_records) < cfg.batch_size:
        raise InvalidInputError(
            f"{len(train_records)} training pairs is fewer than batch_size={cfg.batch_size}")
    train_keys = {r.spec.key() for r in train_records}
    if any(r.spec.key() in train_keys for r in val_records):
        raise InvalidInputError("training and validation pairs overlap")

    embedder = text_embedder or _DEFAULT_EMBEDDER
    cache = windows if isinstance(windows, FeatureCache) else FeatureCache(windows, encoder)
    P = segment_features_matrix([r.spec for r in train_records], cache)
    T = _text_matrix(train_records, embedder)
    Pv = segment_features_matrix([r.spec for r in val_records], cache)
    Tv = _text_matrix(val_records, embedder) if val_records else np.zeros((0, T.shape[1]))

    rng = np.random.default_rng(cfg.rng_seed)
    if model is None:
        model = DualEncoder.init(cfg, rng, P.shape[1], T.shape[1])
        if cfg.standardize:
            model.feature_mean = P.mean(axis=0)
            scale = P.std(axis=0)
            model.feature_scale = np.where(scale > 1e-12, scale, 1.0)
            # tokens shared by every caption would otherwise dominate the text input
            model.text_mean = T.mean(axis=0)
    model.text_embedder = embedder
    opt = _AdamW(model, cfg)

    n = P.shape[0]
    best = None
    log = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for step, start in enumerate(range(0, n, cfg.batch_size), start=1):
            idx = order[start:start + cfg.batch_size]
            if idx.size < 2:
                continue
            loss, grads = batch_loss_and_grads(model, P[idx], T[idx], cfg.tau)
            if not np.isfinite(loss):
                raise TrainingFailure(f"non-finite loss at epoch {epoch}, step {step}")
            opt.step(model, grads)
            losses.append(loss)
        acc, vloss = _evaluate(model, Pv, Tv, cfg)
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)),
                 "val_loss": float(vloss), "val_acc1": float(acc)}
        log.append(entry)
        logger.debug("epoch %d: train_loss=%.4f val_loss=%.4f val_acc1=%.4f",
                    epoch, entry["train_loss"], vloss, acc)
        score = acc if np.isfinite(acc) else -entry["train_loss"]
        if best is None or score > best[0]:
            best = (score, epoch, model.segment_head.copy(), model.text_head.copy())

    _, best_epoch, seg, txt = best
    out = DualEncoder(seg, txt, model.feature_mean.copy(), model.feature_scale.copy(),
                      model.text_mean.copy(), model.text_scale.copy(), embedder)
    out.best_epoch = best_epoch
    out.best_acc1 = log[best_epoch - 1]["val_acc1"]
    return out, log


# --- checkpoints -----------------------------------------------------------

CHECKPOINT_VERSION = 1


def _pack(arr):
    return {"shape": list(arr.shape),
            "data": base64.b64encode(np.asarray(arr, dtype="<f4").tobytes()).decode("ascii")}


def _unpack(obj):
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(obj["shape"])


def _round_f32(model):
    """Round all parameters to float32 so a saved and a live model agree exactly."""
    for head in model.heads().values():
        for k, p in head.params().items():
            p[...] = p.astype(np.float32)
    for name in ("feature_mean", "feature_scale", "text_mean", "text_scale"):
        setattr(model, name, getattr(model, name).astype(np.float32).astype(np.float64))
    return model


def save_checkpoint(path, model, cfg=None, log=None):
    _round_f32(model)
    doc = {
        "version": CHECKPOINT_VERSION,
        "embed_dim": model.segment_head.dims[2],
        "segment_head": {"dims": list(model.segment_head.dims),
                         **{k: _pack(v) for k, v in model.segment_head.params().items()}},
        "text_head": {"dims": list(model.text_head.dims),
                      **{k: _pack(v) for k, v in model.text_head.params().items()}},
        "feature_mean": _pack(model.feature_mean),
        "feature_scale": _pack(model.feature_scale),
        "text_mean": _pack(model.text_mean),
        "text_scale": _pack(model.text_scale),
        "best_epoch": getattr(model, "best_epoch", None),
        "best_acc1": getattr(model, "best_acc1", None),
        "config": asdict(cfg) if cfg is not None else None,
        "log": log or [],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path, text_embedder=None):
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"checkpoint not found: {path}")
    doc = json.loads(path.read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {doc.get('version')!r}")

    def head(obj):
        return ProjectionHead(*(_unpack(obj[k]) for k in ProjectionHead.PARAMS))

    model = DualEncoder(head(doc["segment_head"]), head(doc["text_head"]),
                        _unpack(doc["feature_mean"]), _unpack(doc["feature_scale"]),
                        _unpack(doc["text_mean"]), _unpack(doc["text_scale"]),
                        text_embedder or _DEFAULT_EMBEDDER)
    model.best_epoch = doc.get("best_epoch")
    model.best_acc1 = doc.get("best_acc1")
    return model, doc
