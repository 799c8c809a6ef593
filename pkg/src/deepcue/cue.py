"""Content-user embedding model: user tower + audio tower, cosine relevance,
max-margin training with sampled non-listened songs.

Parameters live in a flat ``dict[str, np.ndarray]``. The forward functions take
either arrays or taped :class:`~deepcue.ndiff.Var` handles, so the same code
runs inference and training.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import ndiff as nd
from .audio import crop_offset, grid_windows
from .errors import ColdStartError, ConfigError, DimensionError, SamplingError
from .interactions import BinaryInteractions
from .util import substream

logger = logging.getLogger(__name__)

N_BLOCKS = 5


@dataclass(frozen=True)
class CueConfig:
    embed_dim: int = 128
    feature_dim: int = 50
    negatives: int = 20
    margin: float = 0.2
    channels: tuple[int, ...] = (128, 128, 128, 128, 128)
    kernel_size: int = 3
    pools: tuple[int, ...] = (2, 2, 2, 2, 2)
    mel_bins: int = 128
    context_frames: int = 128
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 3
    base_lr: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 1e-6
    lookup_lr_scale: float = 1.0  # lr multiplier for the lookup-table towers (user, and item in the index variant)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "pools", tuple(int(p) for p in self.pools))
        if self.negatives < 1:
            raise ConfigError("negatives must be >= 1")
        if not 0 < self.margin < 2:
            raise ConfigError("margin must lie in (0, 2)")
        if len(self.channels) != N_BLOCKS or len(self.pools) != N_BLOCKS:
            raise ConfigError(f"audio tower needs exactly {N_BLOCKS} conv/pool blocks")
        if min(self.channels) < 1 or min(self.pools) < 1 or self.kernel_size < 1:
            raise ConfigError("channels, pools and kernel size must be positive")
        if self.feature_dim < 1 or self.embed_dim < 1 or self.batch_size < 1:
            raise ConfigError("dimensions and batch size must be positive")
        if not self.lookup_lr_scale > 0:
            raise ConfigError("lookup_lr_scale must be positive")
        if self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("max_epochs must be >= 0 and patience >= 1")
        if self.pooled_frames < 1:
            raise ConfigError(f"pools {self.pools} leave no frames of {self.context_frames}")

    @property
    def pooled_frames(self) -> int:
        t = self.context_frames
        for w in self.pools:
            t //= w
        return t

    def as_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["pools"] = list(self.pools)
        return d


@dataclass
class TowerParams:
    """Learnable weights plus what is needed to interpret them.

    ``kind`` is ``"cue"`` (audio item tower) or ``"cue-index"`` (item
    embedding tower). ``known_items`` lists the items an index tower was
    trained on; scoring anything else is a cold-start error.
    """

    arrays: dict[str, np.ndarray]
    kind: str = "cue"
    known_items: np.ndarray | None = None

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.arrays.items()}


# --- initialization -----------------------------------------------------------


def _glorot(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _init_fc_stack(rng, prefix: str, rows: int, cfg: CueConfig) -> dict[str, np.ndarray]:
    E, D = cfg.embed_dim, cfg.feature_dim
    return {
        f"{prefix}.embedding": rng.uniform(-0.05, 0.05, size=(rows, E)),
        f"{prefix}.hidden.W": _glorot(rng, (E, E), E, E),
        f"{prefix}.hidden.b": np.zeros(E),
        f"{prefix}.out.W": _glorot(rng, (D, E), E, D),
        f"{prefix}.out.b": np.zeros(D),
    }


def init_audio_tower(rng: np.random.Generator, cfg: CueConfig, out_dim: int | None = None) -> dict[str, np.ndarray]:
    out_dim = cfg.feature_dim if out_dim is None else out_dim
    params = {}
    c_in, k = cfg.mel_bins, cfg.kernel_size
    for n, c_out in enumerate(cfg.channels):
        params[f"audio.conv{n}.K"] = _glorot(rng, (c_out, c_in, k), c_in * k, c_out * k)
        params[f"audio.conv{n}.b"] = np.zeros(c_out)
        c_in = c_out
    params["audio.out.W"] = _glorot(rng, (out_dim, c_in), c_in, out_dim)
    params["audio.out.b"] = np.zeros(out_dim)
    return params


def init_params(cfg: CueConfig, num_users: int, num_items: int | None = None, kind: str = "cue") -> TowerParams:
    """Keras-style defaults: Glorot-uniform weights, zero biases, U(-0.05, 0.05) embeddings."""
    rng = substream(cfg.seed, "init")
    arrays = _init_fc_stack(rng, "user", num_users, cfg)
    if kind == "cue":
        arrays.update(init_audio_tower(rng, cfg))
    elif kind == "cue-index":
        if num_items is None:
            raise ConfigError("index variant needs num_items")
        arrays.update(_init_fc_stack(rng, "item", num_items, cfg))
    else:
        raise ConfigError(f"unknown model kind {kind!r}")
    return TowerParams(arrays, kind)


def build_index_item_variant(cfg: CueConfig, num_users: int, num_items: int) -> TowerParams:
    """Index-index ablation: the item side mirrors the user side exactly."""
    return init_params(cfg, num_users, num_items, kind="cue-index")


# --- forward -------------------------------------------------------------------


def _fc_stack(p: Mapping, prefix: str, idx):
    h = nd.embedding_lookup(p[f"{prefix}.embedding"], idx)
    h = nd.relu(nd.affine(h, p[f"{prefix}.hidden.W"], p[f"{prefix}.hidden.b"]))
    return nd.affine(h, p[f"{prefix}.out.W"], p[f"{prefix}.out.b"])


def user_embed(p: Mapping, users):
    """User feature vector(s) y_U; no activation on the output layer."""
    return _fc_stack(p, "user", users)


def audio_tower(p: Mapping, x, pools):
    """Audio tower on ``[mel, T]`` or ``[B, mel, T]`` windows -> ``[D]`` or ``[B, D]``."""
    single = np.ndim(nd._val(x)) == 2
    h = nd.reshape(x, (1, *np.shape(nd._val(x)))) if single else x
    n = 0
    while f"audio.conv{n}.K" in p:
        h = nd.conv1d(h, p[f"audio.conv{n}.K"], p[f"audio.conv{n}.b"], "same")
        h, _ = nd.maxpool1d(nd.relu(h), pools[n])
        n += 1
    B, C, T = np.shape(nd._val(h))
    h, _ = nd.maxpool1d(h, T)  # global max over the remaining frames
    h = nd.reshape(h, (B, C))
    y = nd.affine(h, p["audio.out.W"], p["audio.out.b"])
    return nd.reshape(y, (np.shape(nd._val(y))[-1],)) if single else y


def item_embed(p: Mapping, cfg: CueConfig, x):
    """y_I for one ``[mel_bins, context_frames]`` window (or a batch of them)."""
    shape = np.shape(nd._val(x))
    if shape[-2:] != (cfg.mel_bins, cfg.context_frames):
        raise DimensionError(f"expected window [{cfg.mel_bins} x {cfg.context_frames}], got {shape}")
    return audio_tower(p, x, cfg.pools)


def relevance(y_u, y_i):
    return nd.cosine(y_u, y_i)


def hinge_loss(r_pos, r_negs, margin: float):
    """``sum_neg max(0, margin - r_pos + r_neg)`` over the last axis of ``r_negs``."""
    if not isinstance(r_pos, nd.Var):
        r_pos = np.asarray(r_pos, dtype=np.float64)
    if not isinstance(r_negs, nd.Var):
        r_negs = np.asarray(r_negs, dtype=np.float64)
    rp = nd.reshape(r_pos, (*np.shape(nd._val(r_pos)), 1))
    return nd.reduce_sum(nd.relu(nd.add(nd.sub(margin, rp), r_negs)), axis=-1)


def tuple_losses(p: Mapping, cfg: CueConfig, users, slots, item_side):
    """Per-tuple hinge losses.

    ``slots`` is ``[B, 1 + k]`` (positive first) indexing the rows of the
    item features produced from ``item_side``: audio windows
    ``[n, mel, T]`` for the audio model or item indices for the index model.
    """
    yu = user_embed(p, users)
    if "item.embedding" in p:
        yi = _fc_stack(p, "item", item_side)
    else:
        yi = audio_tower(p, item_side, cfg.pools)
    yg = nd.embedding_lookup(yi, slots)
    B, D = np.shape(nd._val(yu))
    r = nd.cosine(nd.reshape(yu, (B, 1, D)), yg)
    return hinge_loss(nd.getitem(r, (slice(None), 0)), nd.getitem(r, (slice(None), slice(1, None))), cfg.margin)


def batch_loss(p, cfg, users, slots, item_side):
    return nd.reduce_mean(tuple_losses(p, cfg, users, slots, item_side))


# --- sampling ------------------------------------------------------------------


def sample_negatives(positives: np.ndarray, pool: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` distinct items from ``pool`` the user has not listened to."""
    candidates = pool[~np.isin(pool, positives)]
    if len(candidates) < k:
        raise SamplingError(f"only {len(candidates)} non-listened items available, need {k}")
    return rng.choice(candidates, size=k, replace=False)


# --- training ------------------------------------------------------------------


@dataclass
class TrainResult:
    params: TowerParams
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


LOG_HEADER = "epoch\ttrain_loss\tvalid_loss\tlr"


def _crop(mel: np.ndarray, frames: int, rng) -> np.ndarray:
    start = crop_offset(mel.shape[1], frames, rng)
    return mel[:, start : start + frames]


def _validation_tuples(b_train, b_valid, pool, cfg, rng):
    users, slots_items = [], []
    for u, pos in enumerate(b_valid.positives):
        seen = np.union1d(b_train.positives[u], pos)
        for i in pos:
            negs = sample_negatives(seen, pool, cfg.negatives, rng)
            users.append(u)
            slots_items.append(np.concatenate([[i], negs]))
    return np.array(users, dtype=np.int64), np.array(slots_items, dtype=np.int64).reshape(len(users), -1)


def train(
    b: BinaryInteractions,
    mels: Mapping[int, np.ndarray] | None,
    cfg: CueConfig,
    train_items,
    valid: BinaryInteractions | None = None,
    valid_items=None,
    kind: str = "cue",
    log: Callable[[str], None] | None = None,
    init: TowerParams | None = None,
) -> TrainResult:
    """Fit the two towers with max-margin negative sampling.

    Each epoch visits every training ``(user, positive)`` pair once in a
    seeded random order. Every tuple gets fresh negatives; inside one batch
    each distinct item gets one fresh random crop shared by the tuples that
    use it. Early stopping watches the validation loss (fixed negatives and
    crops) and the best-validation parameters are returned.

    ``mels`` maps item index -> normalized ``[mel_bins, frames]`` matrix and
    is ignored by the index variant.
    """
    train_items = np.asarray(train_items, dtype=np.int64)
    b_tr = b.restrict(train_items)
    pairs = np.array(b_tr.pairs(), dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise ConfigError("no training interactions")
    if kind == "cue" and mels is None:
        raise ConfigError("audio model needs spectrograms")
    params = init if init is not None else init_params(cfg, b.num_users, b.num_items, kind)
    arrays = dict(params.arrays)

    rng_order = substream(cfg.seed, "order")
    rng_neg = substream(cfg.seed, "sampling")
    rng_crop = substream(cfg.seed, "crops")
    scales = {k: cfg.lookup_lr_scale for k in arrays if k.startswith(("user.", "item."))}
    state = nd.OptimizerState.for_params(
        arrays, base_lr=cfg.base_lr, momentum=cfg.momentum, lr_decay=cfg.lr_decay, lr_scale=scales
    )

    # fixed validation set
    val = None
    if valid is not None and valid_items is not None and valid.nnz:
        rng_val = substream(cfg.seed, "valid")
        pool = np.union1d(train_items, np.asarray(valid_items, dtype=np.int64))
        v_users, v_items = _validation_tuples(b_tr, valid.restrict(valid_items), pool, cfg, rng_val)
        v_uniq, v_slots = np.unique(v_items, return_inverse=True)
        v_slots = v_slots.reshape(v_items.shape)
        if kind == "cue":
            v_side = np.stack([_crop(mels[int(i)], cfg.context_frames, rng_val) for i in v_uniq])
        else:
            v_side = v_uniq
        val = (v_users, v_slots, v_side)

    def validation_loss(arr):
        if val is None:
            return float("nan")
        return float(np.mean(_chunked_losses(arr, cfg, *val)))

    if log:
        log(LOG_HEADER)
    result = TrainResult(TowerParams(dict(arrays), kind, train_items if kind == "cue-index" else None))
    best = validation_loss(arrays) if val is not None else math.inf
    stale = 0
    pos_of = b_tr.positives
    neg_pool = {}
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng_order.permutation(len(pairs))
        total, count = 0.0, 0
        lr = state.effective_lr
        for start in range(0, len(order), cfg.batch_size):
            batch = pairs[order[start : start + cfg.batch_size]]
            users = batch[:, 0]
            items = np.empty((len(batch), cfg.negatives + 1), dtype=np.int64)
            items[:, 0] = batch[:, 1]
            for row, u in enumerate(users.tolist()):
                if u not in neg_pool:
                    neg_pool[u] = train_items[~np.isin(train_items, pos_of[u])]
                cand = neg_pool[u]
                if len(cand) < cfg.negatives:
                    raise SamplingError(f"user {u}: only {len(cand)} non-listened training items")
                items[row, 1:] = rng_neg.choice(cand, size=cfg.negatives, replace=False)
            uniq, slots = np.unique(items, return_inverse=True)
            slots = slots.reshape(items.shape)
            if kind == "cue":
                side = np.stack([_crop(mels[int(i)], cfg.context_frames, rng_crop) for i in uniq])
            else:
                side = uniq

            tape = nd.GradTape()
            pv = tape.params(arrays)
            loss = batch_loss(pv, cfg, users, slots, side)
            grads = nd.grad(tape, loss)
            tape.clear()
            arrays, state = nd.nesterov_step(arrays, grads, state)
            total += float(loss.value) * len(batch)
            count += len(batch)

        train_loss = total / count
        v_loss = validation_loss(arrays)
        result.history.append({"epoch": epoch, "train_loss": train_loss, "valid_loss": v_loss, "lr": lr})
        if log:
            log(f"{epoch}\t{train_loss:.6f}\t{v_loss:.6f}\t{lr:.6g}")
        if val is None:
            result.params = TowerParams(dict(arrays), kind, result.params.known_items)
            result.best_epoch = epoch
            continue
        if v_loss < best:
            best, stale = v_loss, 0
            result.params = TowerParams(dict(arrays), kind, result.params.known_items)
            result.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return result


def _chunked_losses(p, cfg, users, slots, side, chunk: int = 256):
    """Untaped per-tuple losses; item features computed once for all of ``side``."""
    if "item.embedding" in p:
        yi = _fc_stack(p, "item", side)
    else:
        yi = np.concatenate([audio_tower(p, side[s : s + chunk], cfg.pools) for s in range(0, len(side), chunk)])
    yu = user_embed(p, users)
    r = nd.cosine(yu[:, None, :], yi[slots])
    return hinge_loss(r[:, 0], r[:, 1:], cfg.margin)


# --- inference -----------------------------------------------------------------


def clip_embeddings(params: TowerParams, cfg: CueConfig, mels: Mapping[int, np.ndarray], items, chunk: int = 128) -> np.ndarray:
    """Clip-level y_I per item: mean of window embeddings over the non-overlapping grid."""
    items = [int(i) for i in items]
    if params.kind == "cue-index":
        return index_item_embeddings(params, items)
    p = params.arrays
    windows, owner = [], []
    for row, i in enumerate(items):
        g = grid_windows(mels[i], cfg.context_frames)
        windows.append(g)
        owner.extend([row] * len(g))
    if not windows:
        return np.zeros((0, cfg.feature_dim))
    stacked = np.concatenate(windows)
    feats = np.concatenate([audio_tower(p, stacked[s : s + chunk], cfg.pools) for s in range(0, len(stacked), chunk)])
    owner = np.array(owner)
    out = np.zeros((len(items), feats.shape[1]))
    np.add.at(out, owner, feats)
    return out / np.bincount(owner, minlength=len(items))[:, None]


def index_item_embeddings(params: TowerParams, items) -> np.ndarray:
    items = np.asarray(items, dtype=np.int64)
    known = params.known_items
    if known is not None:
        unseen = items[~np.isin(items, known)]
        if len(unseen):
            raise ColdStartError(f"index model cannot embed unseen items {unseen[:5].tolist()}")
    return _fc_stack(params.arrays, "item", items)


def user_embeddings(params: TowerParams, users) -> np.ndarray:
    return user_embed(params.arrays, np.asarray(users, dtype=np.int64))


def score_user_items(params: TowerParams, cfg: CueConfig, u: int, item_features: np.ndarray) -> np.ndarray:
    """R(u, i) for every row of precomputed clip-level item features."""
    yu = user_embed(params.arrays, int(u))
    return nd.cosine(yu[None, :], item_features)
