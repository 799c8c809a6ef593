"""WMF+Regression baseline: the cue audio tower trained to regress WMF item factors."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import ndiff as nd
from .audio import crop_offset, grid_windows
from .cue import CueConfig, audio_tower, init_audio_tower
from .errors import ConfigError, DimensionError, LengthError
from .util import substream

logger = logging.getLogger(__name__)

LOG_HEADER = "epoch\ttrain_loss\tlr"


@dataclass
class RegressionModel:
    """Audio tower weights whose output width equals the WMF rank."""

    arrays: dict[str, np.ndarray]
    cfg: CueConfig
    out_dim: int
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.arrays["audio.out.W"].shape[0] != self.out_dim:
            raise ConfigError("regression tower output width must equal the factor rank")


def init_regression(cfg: CueConfig, out_dim: int) -> RegressionModel:
    return RegressionModel(init_audio_tower(substream(cfg.seed, "init"), cfg, out_dim), cfg, out_dim)


def regression_loss(p: Mapping, cfg: CueConfig, windows, targets):
    return nd.mse(audio_tower(p, windows, cfg.pools), targets)


def train_regression(
    mels: Mapping[int, np.ndarray],
    targets: np.ndarray,
    items,
    cfg: CueConfig,
    log: Callable[[str], None] | None = None,
    init: RegressionModel | None = None,
) -> RegressionModel:
    """Minimize ``sum ||tower(x_i) - v_i||^2 / N`` with Nesterov SGD.

    ``targets`` is indexed by item (row ``i`` is the factor of item ``i``).
    Every epoch visits each item once in a seeded order with one fresh
    random crop per item; the run is exactly ``cfg.max_epochs`` epochs.
    """
    items = np.asarray(items, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim != 2:
        raise DimensionError("targets must be [num_items, D]")
    if len(items) == 0:
        raise ConfigError("no training items")
    model = init if init is not None else init_regression(cfg, targets.shape[1])
    if model.out_dim != targets.shape[1]:
        raise ConfigError(f"tower output {model.out_dim} != factor rank {targets.shape[1]}")
    arrays = dict(model.arrays)
    state = nd.OptimizerState.for_params(arrays, base_lr=cfg.base_lr, momentum=cfg.momentum, lr_decay=cfg.lr_decay)
    rng_order = substream(cfg.seed, "order")
    rng_crop = substream(cfg.seed, "crops")
    history = []
    if log:
        log(LOG_HEADER)
    for epoch in range(1, cfg.max_epochs + 1):
        order = items[rng_order.permutation(len(items))]
        lr = state.effective_lr
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            windows = []
            for i in batch.tolist():
                mel = mels[i]
                off = crop_offset(mel.shape[1], cfg.context_frames, rng_crop)
                windows.append(mel[:, off : off + cfg.context_frames])
            tape = nd.GradTape()
            pv = tape.params(arrays)
            loss = regression_loss(pv, cfg, np.stack(windows), targets[batch])
            grads = nd.grad(tape, loss)
            tape.clear()
            arrays, state = nd.nesterov_step(arrays, grads, state)
            total += float(loss.value) * len(batch)
        history.append({"epoch": epoch, "train_loss": total / len(items), "lr": lr})
        if log:
            log(f"{epoch}\t{total / len(items):.6f}\t{lr:.6g}")
    return RegressionModel(arrays, cfg, model.out_dim, history)


def predict_item_factor(m: RegressionModel, x: np.ndarray, chunk: int = 128) -> np.ndarray:
    """Clip-level prediction: mean over the non-overlapping grid of context windows."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != m.cfg.mel_bins:
        raise DimensionError(f"expected [{m.cfg.mel_bins} x frames], got {x.shape}")
    if x.shape[1] < m.cfg.context_frames:
        raise LengthError(f"clip has {x.shape[1]} frames, need {m.cfg.context_frames}")
    windows = grid_windows(x, m.cfg.context_frames)
    preds = np.concatenate(
        [audio_tower(m.arrays, windows[s : s + chunk], m.cfg.pools) for s in range(0, len(windows), chunk)]
    )
    return preds.mean(axis=0)


def predict_factors(m: RegressionModel, mels: Mapping[int, np.ndarray], items) -> np.ndarray:
    return np.stack([predict_item_factor(m, mels[int(i)]) for i in items]) if len(items) else np.zeros((0, m.out_dim))
