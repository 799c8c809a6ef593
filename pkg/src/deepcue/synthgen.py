"""Synthetic datasets with planted user/item factors and factor-encoding audio.

Users and items get latent vectors ``u*, v* ~ N(0, I)``. A pair is a
positive with probability ``sigmoid(sharpness * u*.v* - tau)`` where ``tau``
is solved so the expected density hits the target. Each item's clip is a
sum of sinusoids, one per latent dimension, at fixed mel-filter centers with
amplitude ``amplitude * softplus(v*_d)``, so the spectrum carries the item
factor and cold-start recommendation is learnable from audio.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from os import PathLike
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .audio import DspConfig, mel_center_frequencies, write_wav
from .errors import ConfigError
from .util import substream

logger = logging.getLogger(__name__)

FREQ_LO, FREQ_HI = 200.0, 8000.0


@dataclass(frozen=True)
class SynthConfig:
    num_users: int = 500
    num_items: int = 300
    rank: int = 8
    density: float = 0.05
    clip_seconds: float = 6.0
    num_tags: int = 10
    sharpness: float = 2.0  # logit scale on u*.v*; see module docstring
    amplitude: float = 0.02
    noise: float = 0.001
    tag_rate: float = 0.2  # fraction of items carrying each tag
    seed: int = 0

    def __post_init__(self):
        if min(self.num_users, self.num_items, self.rank, self.num_tags) < 1:
            raise ConfigError("synth sizes must be positive")
        if not 0 < self.density < 1 or not 0 < self.tag_rate < 1:
            raise ConfigError("density and tag_rate must lie in (0, 1)")
        if self.clip_seconds <= 0 or self.sharpness <= 0 or self.amplitude <= 0 or self.noise < 0:
            raise ConfigError("clip length, sharpness and amplitude must be positive")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthData:
    cfg: SynthConfig
    U: np.ndarray  # [users, rank]
    V: np.ndarray  # [items, rank]
    tau: float
    positives: np.ndarray  # [users, items] bool
    counts: np.ndarray  # [users, items] int, 0 where not positive
    tags: np.ndarray  # [items, tags] bool
    frequencies: np.ndarray  # [rank] Hz

    def user_id(self, u: int) -> str:
        return f"user{u:04d}"

    def item_id(self, i: int) -> str:
        return f"song{i:04d}"

    def tag_id(self, t: int) -> str:
        return f"tag{t:02d}"


def calibrate_tau(logits: np.ndarray, density: float) -> float:
    """Offset making ``mean(sigmoid(logits - tau)) == density``."""
    lo, hi = float(logits.min()) - 50.0, float(logits.max()) + 50.0
    f = lambda tau: float(expit(logits - tau).mean()) - density  # noqa: E731
    if not f(lo) > 0 > f(hi):
        raise ConfigError(f"density {density} unreachable")
    return float(brentq(f, lo, hi, xtol=1e-12))


def sine_frequencies(rank: int, dsp: DspConfig = DspConfig()) -> np.ndarray:
    """``rank`` distinct mel-filter centers spread evenly (in mel) over 200-8000 Hz."""
    centers = mel_center_frequencies(dsp)
    usable = np.flatnonzero((centers >= FREQ_LO) & (centers <= FREQ_HI))
    if len(usable) < rank:
        raise ConfigError(f"only {len(usable)} mel centers in range for rank {rank}")
    picks = usable[np.round(np.linspace(0, len(usable) - 1, rank)).astype(int)]
    return centers[picks]


def softplus(x):
    return np.logaddexp(0.0, x)


def item_audio(v: np.ndarray, freqs: np.ndarray, cfg: SynthConfig, rng: np.random.Generator, sample_rate: int = 22050):
    n = int(round(cfg.clip_seconds * sample_rate))
    t = np.arange(n) / sample_rate
    phases = rng.uniform(0.0, 2 * np.pi, size=len(freqs))
    amps = cfg.amplitude * softplus(v)
    x = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t[None, :] + phases[:, None])).sum(axis=0)
    return x + rng.normal(scale=cfg.noise, size=n)


def _sample_positives(probs: np.ndarray, rng: np.random.Generator, max_rounds: int = 1000) -> np.ndarray:
    """Bernoulli draws; rows or columns left empty are redrawn until every user and item has a positive."""
    pos = rng.random(probs.shape) < probs
    for _ in range(max_rounds):
        empty_u = np.flatnonzero(~pos.any(axis=1))
        empty_i = np.flatnonzero(~pos.any(axis=0))
        if not len(empty_u) and not len(empty_i):
            return pos
        for u in empty_u:
            pos[u] = rng.random(probs.shape[1]) < probs[u]
        for i in empty_i:
            pos[:, i] = rng.random(probs.shape[0]) < probs[:, i]
    raise ConfigError("could not give every user and item a positive; raise density")


def sample(cfg: SynthConfig, dsp: DspConfig = DspConfig()) -> SynthData:
    """Draw factors, interactions and tags (no audio)."""
    rng = substream(cfg.seed, "synth")
    U = rng.normal(size=(cfg.num_users, cfg.rank))
    V = rng.normal(size=(cfg.num_items, cfg.rank))
    logits = cfg.sharpness * (U @ V.T)
    tau = calibrate_tau(logits, cfg.density)
    positives = _sample_positives(expit(logits - tau), rng)
    counts = np.where(positives, rng.geometric(0.5, size=positives.shape), 0)
    W = rng.normal(size=(cfg.num_tags, cfg.rank))
    proj = V @ W.T
    tags = proj > np.quantile(proj, 1.0 - cfg.tag_rate, axis=0)
    return SynthData(cfg, U, V, tau, positives, counts, tags, sine_frequencies(cfg.rank, dsp))


def generate(cfg: SynthConfig, out_dir: str | PathLike, dsp: DspConfig = DspConfig()) -> SynthData:
    """Write ``triplets.tsv``, ``tags.tsv``, ``audio/<song>.wav`` and ``ground_truth.json``."""
    data = sample(cfg, dsp)
    out = Path(out_dir)
    try:
        (out / "audio").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None

    lines = []
    for u, i in zip(*np.nonzero(data.positives)):
        lines.append(f"{data.user_id(u)}\t{data.item_id(i)}\t{int(data.counts[u, i])}\n")
    (out / "triplets.tsv").write_text("".join(lines))

    tag_lines = []
    for i in range(cfg.num_items):
        names = [data.tag_id(t) for t in np.flatnonzero(data.tags[i])]
        if names:
            tag_lines.append(f"{data.item_id(i)}\t{','.join(names)}\n")
    (out / "tags.tsv").write_text("".join(tag_lines))

    rng_audio = substream(cfg.seed, "audio")
    for i in range(cfg.num_items):
        write_wav(out / "audio" / f"{data.item_id(i)}.wav", item_audio(data.V[i], data.frequencies, cfg, rng_audio, dsp.sample_rate), dsp.sample_rate)

    truth = {
        "config": cfg.as_dict(),
        "tau": data.tau,
        "frequencies": data.frequencies.tolist(),
        "users": [data.user_id(u) for u in range(cfg.num_users)],
        "items": [data.item_id(i) for i in range(cfg.num_items)],
        "u_star": data.U.tolist(),
        "v_star": data.V.tolist(),
    }
    (out / "ground_truth.json").write_text(json.dumps(truth, sort_keys=True))
    logger.info("wrote %d positives over %d users x %d items to %s", int(data.positives.sum()), cfg.num_users, cfg.num_items, out)
    return data


def load_ground_truth(path: str | PathLike) -> dict:
    truth = json.loads(Path(path).read_text())
    truth["u_star"] = np.array(truth["u_star"])
    truth["v_star"] = np.array(truth["v_star"])
    return truth
