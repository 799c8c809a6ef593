"""Recommendation AUC per user and tag-transfer AUC per tag.

Both tasks produce an :class:`EvalReport`, serialized as JSON with sorted
keys so reruns are byte-identical.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from . import ndiff as nd
from .errors import ConfigError, DimensionError, EvaluationError, MissingAudioError, ValidationError
from .interactions import BinaryInteractions, ItemSplit, TagSet
from .util import substream

logger = logging.getLogger(__name__)

ScoreFn = Callable[[int, np.ndarray], np.ndarray]


def auc(scores, positives) -> float | None:
    """Mann-Whitney AUC with ties counted one half.

    ``positives`` is a boolean mask or an index array into ``scores``.
    Returns ``None`` when there is no positive or no negative (skip signal).
    """
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.zeros(len(scores), dtype=bool)
    positives = np.asarray(positives)
    if positives.dtype == bool:
        if positives.shape != scores.shape:
            raise DimensionError("positive mask does not match scores")
        mask = positives
    else:
        mask[positives.astype(np.int64)] = True
    n_pos = int(mask.sum())
    n_neg = len(scores) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    if not np.all(np.isfinite(scores)):
        raise ValidationError("scores must be finite")
    ranks = rankdata(scores)  # average ranks: ties contribute one half
    u_stat = ranks[mask].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


@dataclass
class EvalReport:
    task: str
    system: str
    mean_auc: float
    n_evaluated: int
    n_skipped: int
    per_unit: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def _report(task, system, per_unit, skipped, config) -> EvalReport:
    if not per_unit:
        raise EvaluationError(f"{task}: no evaluable units ({skipped} skipped)")
    values = [row["auc"] for row in per_unit]
    return EvalReport(task, system, float(math.fsum(values) / len(values)), len(values), skipped, per_unit, dict(config or {}))


# --- task 1: recommendation ----------------------------------------------------


def eval_recommendation(
    score_fn: ScoreFn,
    b_test: BinaryInteractions,
    items,
    users=None,
    exclude: BinaryInteractions | None = None,
    system: str = "",
    config: Mapping | None = None,
) -> EvalReport:
    """Mean per-user AUC of ``score_fn`` over the item universe ``items``.

    A user's positives are their ``b_test`` positives inside ``items``; items
    the user has in ``exclude`` (e.g. training pairs on a warm split) are
    dropped from that user's candidate list. Users without a positive or a
    negative are skipped and counted.
    """
    items = np.asarray(items, dtype=np.int64)
    users = range(b_test.num_users) if users is None else [int(u) for u in users]
    per_unit, skipped = [], 0
    for u in users:
        cand = items
        if exclude is not None and len(exclude.positives[u]):
            cand = items[~np.isin(items, exclude.positives[u])]
        mask = np.isin(cand, b_test.positives[u])
        if not mask.any() or mask.all():
            skipped += 1
            continue
        scores = np.asarray(score_fn(u, cand), dtype=np.float64)
        if scores.shape != cand.shape:
            raise DimensionError(f"score_fn returned {scores.shape} for {len(cand)} items")
        per_unit.append({"id": u, "auc": auc(scores, mask)})
    return _report("rec", system, per_unit, skipped, config)


def popularity_system(b_train: BinaryInteractions) -> ScoreFn:
    """One global ranking by listener count, identical for every user."""
    counts = b_train.item_user_counts().astype(np.float64)
    cache: dict[bytes, np.ndarray] = {}

    def score(u: int, items: np.ndarray) -> np.ndarray:
        key = np.asarray(items, dtype=np.int64).tobytes()
        if key not in cache:
            cache[key] = counts[np.asarray(items, dtype=np.int64)]
        return cache[key]

    return score


def matrix_system(user_factors: np.ndarray, item_factors: np.ndarray, cosine: bool = False) -> ScoreFn:
    """Dot-product (WMF, oracle) or cosine (cue) scores from dense factor rows."""
    U = np.asarray(user_factors, dtype=np.float64)
    V = np.asarray(item_factors, dtype=np.float64)

    def score(u: int, items: np.ndarray) -> np.ndarray:
        if cosine:
            return nd.cosine(U[u][None, :], V[items])
        return V[items] @ U[u]

    return score


# --- features ------------------------------------------------------------------


def extract_item_features(system: str, model, items, mels: Mapping[int, np.ndarray] | None = None, cfg=None) -> np.ndarray:
    """Per-item feature rows: WMF V rows, predicted factors, or clip-level y_I."""
    from .cue import clip_embeddings
    from .regression import predict_factors

    items = [int(i) for i in items]
    if system == "wmf":
        return np.asarray(model.V)[items]
    if system in ("regression", "cue"):
        missing = [i for i in items if mels is None or i not in mels]
        if missing:
            raise MissingAudioError(f"no audio for items {missing[:5]}")
        if system == "regression":
            return predict_factors(model, mels, items)
        return clip_embeddings(model, cfg, mels, items)
    if system == "cue-index":
        return clip_embeddings(model, cfg, {}, items)
    raise ConfigError(f"unknown system {system!r}")


# --- task 2: tag transfer ----------------------------------------------------------


@dataclass(frozen=True)
class TagMlpConfig:
    hidden: int = 128
    max_epochs: int = 500
    patience: int = 10
    batch_size: int = 32
    base_lr: float = 0.05
    momentum: float = 0.9
    lr_decay: float = 1e-6
    standardize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.hidden < 1 or self.max_epochs < 0 or self.patience < 1 or self.batch_size < 1:
            raise ConfigError(f"invalid tag MLP config {self}")

    def as_dict(self) -> dict:
        return asdict(self)


def align_tags(tags: TagSet, item_vocab: Sequence[str]) -> np.ndarray:
    """Tag matrix with one row per item in ``item_vocab``; untagged items get zero rows."""
    row_of = {item: r for r, item in enumerate(tags.item_ids)}
    out = np.zeros((len(item_vocab), tags.num_tags), dtype=np.float64)
    for i, item in enumerate(item_vocab):
        r = row_of.get(item)
        if r is not None:
            out[i] = tags.matrix[r]
    return out


def _mlp_logits(p, x):
    h = nd.relu(nd.affine(x, p["mlp.hidden.W"], p["mlp.hidden.b"]))
    return nd.affine(h, p["mlp.out.W"], p["mlp.out.b"])


def train_tag_mlp(x_train, y_train, x_valid, y_valid, cfg: TagMlpConfig):
    """2-layer MLP with sigmoid outputs and mean BCE; early stop on validation BCE."""
    rng = substream(cfg.seed, "tags")
    D, T = x_train.shape[1], y_train.shape[1]
    lim_h, lim_o = math.sqrt(6.0 / (D + cfg.hidden)), math.sqrt(6.0 / (cfg.hidden + T))
    arrays = {
        "mlp.hidden.W": rng.uniform(-lim_h, lim_h, size=(cfg.hidden, D)),
        "mlp.hidden.b": np.zeros(cfg.hidden),
        "mlp.out.W": rng.uniform(-lim_o, lim_o, size=(T, cfg.hidden)),
        "mlp.out.b": np.zeros(T),
    }
    state = nd.OptimizerState.for_params(arrays, base_lr=cfg.base_lr, momentum=cfg.momentum, lr_decay=cfg.lr_decay)
    has_valid = len(x_valid) > 0

    def valid_loss(p):
        return float(nd.bce_with_logits(_mlp_logits(p, x_valid), y_valid)) if has_valid else math.inf

    best, best_arrays, stale, epochs = valid_loss(arrays), dict(arrays), 0, 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(x_train))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            tape = nd.GradTape()
            pv = tape.params(arrays)
            loss = nd.bce_with_logits(_mlp_logits(pv, x_train[idx]), y_train[idx])
            grads = nd.grad(tape, loss)
            tape.clear()
            arrays, state = nd.nesterov_step(arrays, grads, state)
        epochs = epoch + 1
        if not has_valid:
            best_arrays = arrays
            continue
        v = valid_loss(arrays)
        if v < best:
            best, best_arrays, stale = v, dict(arrays), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    logger.debug("tag MLP stopped after %d epochs (best valid BCE %.4f)", epochs, best)
    return best_arrays, epochs


def tag_transfer(
    features: np.ndarray,
    labels: np.ndarray,
    split: ItemSplit,
    cfg: TagMlpConfig = TagMlpConfig(),
    system: str = "",
    tag_names: Sequence[str] | None = None,
    config: Mapping | None = None,
) -> EvalReport:
    """Train the tag MLP on ``split.train`` items and report per-tag test AUC.

    ``features`` and ``labels`` are row-aligned by item index. Features are
    standardized with train-split statistics when ``cfg.standardize``.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if features.ndim != 2 or labels.ndim != 2 or len(features) != len(labels):
        raise DimensionError(f"features {features.shape} and labels {labels.shape} are not row-aligned")
    if not np.all(np.isfinite(features)):
        raise ValidationError("features contain non-finite values")
    x = features
    if cfg.standardize:
        mu = features[split.train].mean(axis=0)
        sd = features[split.train].std(axis=0)
        x = (features - mu) / np.where(sd > 0, sd, 1.0)
    params, epochs = train_tag_mlp(x[split.train], labels[split.train], x[split.valid], labels[split.valid], cfg)
    probs = nd.sigmoid(_mlp_logits(params, x[split.test]))
    y_test = labels[split.test] > 0.5
    names = list(tag_names) if tag_names is not None else list(range(labels.shape[1]))
    per_unit, skipped = [], 0
    for t in range(labels.shape[1]):
        a = auc(probs[:, t], y_test[:, t])
        if a is None:
            skipped += 1
            continue
        per_unit.append({"id": names[t], "auc": a})
    echo = {"mlp": cfg.as_dict(), "epochs_run": epochs, **(config or {})}
    return _report("tags", system, per_unit, skipped, echo)
