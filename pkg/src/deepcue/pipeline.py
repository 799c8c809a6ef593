"""End-to-end experiment stages shared by the CLI and the acceptance suite.

A :class:`RunConfig` holds every knob. It round-trips through JSON, and
``--set section.key=value`` style overrides are applied with
:func:`apply_overrides`. All randomness derives from ``RunConfig.seed``
through named sub-streams.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import Callable

import numpy as np

from . import cue
from .audio import DspConfig, Normalizer, fit_normalizer, melspectrogram, read_wav
from .checkpoint import Checkpoint, subset
from .cue import CueConfig, TowerParams
from .errors import ConfigError, MissingAudioError, ValidationError
from .evaluation import (
    EvalReport,
    TagMlpConfig,
    align_tags,
    eval_recommendation,
    extract_item_features,
    matrix_system,
    popularity_system,
    tag_transfer,
)
from .interactions import (
    BinaryInteractions,
    InteractionSet,
    ItemSplit,
    binarize,
    filter_topk,
    load_tags,
    load_triplets,
    split_items,
    split_pairs,
)
from .regression import RegressionModel, train_regression
from .synthgen import SynthConfig, load_ground_truth
from .util import substream_seed
from .wmf import Factors, WmfConfig, fit_wmf, wmf_objective

logger = logging.getLogger(__name__)

SYSTEMS = ("wmf", "regression", "cue", "cue-index")
PROTOCOLS = ("cold", "warm")


@dataclass
class RunConfig:
    data_dir: str = "data"
    out_dir: str = "runs"
    seed: int = 0
    protocol: str = "cold"  # cold: item split; warm: held-out user-item pairs
    split_ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    warm_holdout: float = 0.2
    top_items: int | None = None
    top_users: int | None = None
    popularity_source: str = "all"  # "all" interactions or "train" only
    dsp: DspConfig = field(default_factory=DspConfig)
    wmf: WmfConfig = field(default_factory=WmfConfig)
    cue: CueConfig = field(default_factory=CueConfig)
    regression: CueConfig = field(default_factory=CueConfig)
    tags: TagMlpConfig = field(default_factory=TagMlpConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}")
        if self.popularity_source not in ("all", "train"):
            raise ConfigError("popularity_source must be 'all' or 'train'")
        if not 0 < self.warm_holdout < 1:
            raise ConfigError("warm_holdout must lie in (0, 1)")
        self.split_ratios = tuple(float(r) for r in self.split_ratios)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        for key in ("cue", "regression"):
            d[key] = getattr(self, key).as_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = copy.deepcopy(d)
        sections = {"dsp": DspConfig, "wmf": WmfConfig, "cue": CueConfig, "regression": CueConfig,
                    "tags": TagMlpConfig, "synth": SynthConfig}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        for name, typ in sections.items():
            if name in d:
                d[name] = _build(typ, d[name], name)
        return cls(**d)

    def resolved(self, deterministic: bool = False) -> "RunConfig":
        """Copy with every section seed derived from the run seed."""
        r = copy.deepcopy(self)
        s = self.seed
        r.wmf = dataclasses.replace(r.wmf, seed=substream_seed(s, "wmf"), n_jobs=1 if deterministic else r.wmf.n_jobs)
        r.cue = dataclasses.replace(r.cue, seed=substream_seed(s, "cue"))
        r.regression = dataclasses.replace(r.regression, seed=substream_seed(s, "regression"))
        r.tags = dataclasses.replace(r.tags, seed=substream_seed(s, "tags"))
        r.synth = dataclasses.replace(r.synth, seed=s)
        return r


def _build(typ, values, section):
    if isinstance(values, typ):
        return values
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    names = {f.name for f in dataclasses.fields(typ)}
    bad = set(values) - names
    if bad:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(bad)}")
    try:
        return typ(**values)
    except TypeError as exc:
        raise ConfigError(f"section {section!r}: {exc}") from None


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``key.sub=value`` strings; values parse as JSON, falling back to plain strings."""
    d = copy.deepcopy(d)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-section")
        node[parts[-1]] = value
    return d


def load_config(path: str | PathLike | None, overrides=()) -> RunConfig:
    base: dict = {}
    if path is not None:
        try:
            base = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
    return RunConfig.from_dict(apply_overrides(base, overrides))


# --- data ------------------------------------------------------------------------


@dataclass
class Dataset:
    interactions: InteractionSet
    b: BinaryInteractions
    split: ItemSplit  # item split (cold); under warm every item is in train
    b_train: BinaryInteractions  # interactions visible to the content models
    b_eval: BinaryInteractions  # held-out positives to rank
    data_dir: Path
    _mels: dict[int, np.ndarray] | None = None
    normalizer: Normalizer | None = None

    @property
    def item_vocab(self) -> tuple[str, ...]:
        return self.interactions.item_vocab


def load_dataset(cfg: RunConfig) -> Dataset:
    root = Path(cfg.data_dir)
    s = load_triplets(root / "triplets.tsv")
    if cfg.top_items or cfg.top_users:
        s = filter_topk(s, cfg.top_items or s.num_items, cfg.top_users or s.num_users)
    b = binarize(s)
    items = np.arange(b.num_items)
    if cfg.protocol == "cold":
        split = split_items(items, cfg.split_ratios, substream_seed(cfg.seed, "split"))
        b_train, b_eval = b, b
    else:
        b_train, b_eval = split_pairs(b, cfg.warm_holdout, substream_seed(cfg.seed, "split"))
        split = ItemSplit(items, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), cfg.seed)
    return Dataset(s, b, split, b_train, b_eval, root)


def dataset_mels(ds: Dataset, dsp: DspConfig, normalizer: Normalizer | None = None) -> dict[int, np.ndarray]:
    """Normalized log-mel matrices for every item, keyed by item index.

    The normalizer is fitted on training items unless one is given (e.g. the
    one stored in a checkpoint).
    """
    if ds._mels is None:
        raw = {}
        for i, item in enumerate(ds.item_vocab):
            path = ds.data_dir / "audio" / f"{item}.wav"
            if not path.exists():
                raise MissingAudioError(f"no audio file for item {item!r} ({path})")
            raw[i] = melspectrogram(read_wav(path, dsp.sample_rate), dsp).values
        ds._mels = raw
    if normalizer is None:
        normalizer = fit_normalizer([ds._mels[int(i)] for i in ds.split.train], per_bin=dsp.per_bin_norm)
    ds.normalizer = normalizer
    return {i: (m - normalizer.mean) / normalizer.std for i, m in ds._mels.items()}


def _normalizer_to_json(n: Normalizer) -> dict:
    return {"mean": np.asarray(n.mean).tolist(), "std": np.asarray(n.std).tolist()}


def _normalizer_from_json(d: dict) -> Normalizer:
    mean, std = np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64)
    return Normalizer(float(mean) if mean.ndim == 0 else mean, float(std) if std.ndim == 0 else std)


# --- training -----------------------------------------------------------------------


def train_system(cfg: RunConfig, ds: Dataset, system: str, log: Callable[[str], None] | None = None) -> Checkpoint:
    """Train one system and return its checkpoint (config echo included)."""
    if system not in SYSTEMS:
        raise ConfigError(f"unknown system {system!r}; choose from {SYSTEMS}")
    echo = {"run": cfg.as_dict(), "system": system}
    train_items, valid_items = ds.split.train, ds.split.valid

    if system == "wmf":
        # the warm upper bound: fitted on every visible interaction, test items included
        if log:
            log("sweep\thalf\tobjective")
        cb = (lambda half, sweep, f: log(f"{sweep + 1}\t{half}\t{wmf_objective(f, ds.b_train, cfg.wmf):.6f}")) if log else None
        f = fit_wmf(ds.b_train, cfg.wmf, callback=cb)
        return Checkpoint("wmf", {"U": f.U, "V": f.V}, echo)

    if system == "regression":
        mels = dataset_mels(ds, cfg.dsp)
        f = fit_wmf(ds.b_train.restrict(train_items), cfg.wmf)
        rcfg = cfg.regression
        m = train_regression(mels, f.V, train_items, rcfg, log=log)
        arrays = {**m.arrays, "wmf.U": f.U}
        echo["normalizer"] = _normalizer_to_json(ds.normalizer)
        return Checkpoint("regression", arrays, echo)

    kind = system
    mels = dataset_mels(ds, cfg.dsp) if kind == "cue" else None
    valid = ds.b_train if len(valid_items) else None
    res = cue.train(ds.b_train, mels, cfg.cue, train_items, valid=valid, valid_items=valid_items, kind=kind, log=log)
    if kind == "cue":
        echo["normalizer"] = _normalizer_to_json(ds.normalizer)
    else:
        echo["known_items"] = [int(i) for i in res.params.known_items]
    echo["best_epoch"] = res.best_epoch
    return Checkpoint(kind, res.params.arrays, echo)


# --- evaluation ------------------------------------------------------------------------


def _tower(ckpt: Checkpoint) -> TowerParams:
    known = ckpt.config.get("known_items")
    return TowerParams(dict(ckpt.arrays), ckpt.model_kind, None if known is None else np.array(known, dtype=np.int64))


def _mels_for(ckpt: Checkpoint, cfg: RunConfig, ds: Dataset):
    norm = ckpt.config.get("normalizer")
    return dataset_mels(ds, cfg.dsp, _normalizer_from_json(norm) if norm else None)


def item_features(ckpt: Checkpoint, cfg: RunConfig, ds: Dataset, items) -> np.ndarray:
    kind = ckpt.model_kind
    if kind == "wmf":
        return extract_item_features("wmf", Factors(ckpt.arrays["U"], ckpt.arrays["V"]), items)
    if kind == "regression":
        model = RegressionModel(subset(ckpt.arrays, "audio."), cfg.regression, ckpt.arrays["audio.out.W"].shape[0])
        return extract_item_features("regression", model, items, _mels_for(ckpt, cfg, ds))
    if kind == "cue":
        return extract_item_features("cue", _tower(ckpt), items, _mels_for(ckpt, cfg, ds), cfg.cue)
    if kind == "cue-index":
        return extract_item_features("cue-index", _tower(ckpt), items, None, cfg.cue)
    raise ValidationError(f"unknown checkpoint model kind {kind!r}")


def score_system(ckpt: Checkpoint, cfg: RunConfig, ds: Dataset, items):
    """Score function over ``items`` for a trained checkpoint."""
    items = np.asarray(items, dtype=np.int64)
    V = item_features(ckpt, cfg, ds, items)
    full = np.zeros((ds.b.num_items, V.shape[1]))
    full[items] = V
    kind = ckpt.model_kind
    if kind == "wmf":
        return matrix_system(ckpt.arrays["U"], full)
    if kind == "regression":
        return matrix_system(ckpt.arrays["wmf.U"], full)
    users = cue.user_embeddings(_tower(ckpt), np.arange(ds.b.num_users))
    return matrix_system(users, full, cosine=True)


def _eval_universe(cfg: RunConfig, ds: Dataset):
    if cfg.protocol == "cold":
        return ds.split.test, None
    return np.arange(ds.b.num_items), ds.b_train


def popularity_report(cfg: RunConfig, ds: Dataset) -> EvalReport:
    items, exclude = _eval_universe(cfg, ds)
    if cfg.protocol == "warm":
        source = ds.b_train  # held-out pairs must stay unseen
    elif cfg.popularity_source == "all":
        source = ds.b
    else:
        source = ds.b_train.restrict(ds.split.train)
    return eval_recommendation(popularity_system(source), ds.b_eval, items, exclude=exclude, system="popularity",
                               config={"protocol": cfg.protocol, "popularity_source": cfg.popularity_source})


def rec_report(ckpt: Checkpoint, cfg: RunConfig, ds: Dataset) -> EvalReport:
    items, exclude = _eval_universe(cfg, ds)
    fn = score_system(ckpt, cfg, ds, items)
    return eval_recommendation(fn, ds.b_eval, items, exclude=exclude, system=ckpt.model_kind,
                               config={"protocol": cfg.protocol, "run": cfg.as_dict()})


def oracle_report(cfg: RunConfig, ds: Dataset) -> EvalReport:
    """Ground-truth factor scores from a synthetic dataset's ``ground_truth.json``."""
    truth = load_ground_truth(ds.data_dir / "ground_truth.json")
    users = {u: k for k, u in enumerate(truth["users"])}
    items = {i: k for k, i in enumerate(truth["items"])}
    try:
        U = truth["u_star"][[users[u] for u in ds.interactions.user_vocab]]
        V = truth["v_star"][[items[i] for i in ds.item_vocab]]
    except KeyError as exc:
        raise ValidationError(f"ground truth does not cover id {exc}") from None
    universe, exclude = _eval_universe(cfg, ds)
    return eval_recommendation(matrix_system(U, V), ds.b_eval, universe, exclude=exclude, system="oracle",
                               config={"protocol": cfg.protocol})


def tags_report(ckpt: Checkpoint | None, cfg: RunConfig, ds: Dataset, features: np.ndarray | None = None,
                system: str | None = None) -> EvalReport:
    """Tag transfer on the item split with features from ``ckpt`` (or given directly)."""
    if cfg.protocol != "cold":
        raise ConfigError("tag transfer uses the item split; run it under the cold protocol")
    tags = load_tags(ds.data_dir / "tags.tsv")
    labels = align_tags(tags, ds.item_vocab)
    if features is None:
        features = item_features(ckpt, cfg, ds, np.arange(ds.b.num_items))
        system = ckpt.model_kind
    return tag_transfer(features, labels, ds.split, cfg.tags, system=system or "features",
                        tag_names=list(tags.tag_vocab), config={"run": cfg.as_dict()})
