"""Log-mel front end: WAV I/O, STFT, mel filterbank, normalization, crops."""

from __future__ import annotations

import functools
import struct
import wave
from dataclasses import asdict, dataclass
from os import PathLike

import numpy as np
from scipy.signal import get_window

from .errors import ConfigError, DataError, DegenerateStatisticsError, LengthError, ParseError


@dataclass(frozen=True)
class DspConfig:
    sample_rate: int = 22050
    fft_size: int = 1024
    hop: int = 512
    window: str = "hann"
    mel_bins: int = 128
    context_seconds: float = 3.0
    fmin: float = 0.0
    fmax: float | None = None  # None -> Nyquist
    per_bin_norm: bool = False

    def __post_init__(self):
        if self.hop < 1 or self.hop > self.fft_size:
            raise ConfigError("hop must lie in [1, fft_size]")
        if self.mel_bins < 1:
            raise ConfigError("mel_bins must be >= 1")
        if self.context_samples < self.fft_size:
            raise ConfigError("context window shorter than one FFT frame")

    @property
    def context_samples(self) -> int:
        return int(round(self.context_seconds * self.sample_rate))

    @property
    def context_frames(self) -> int:
        return num_frames(self.context_samples, self)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MelSpec:
    values: np.ndarray  # [mel_bins, frames]
    source_id: str = ""

    @property
    def frames(self) -> int:
        return self.values.shape[1]

    @property
    def mel_bins(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class Normalizer:
    """Scalar (or per-bin ``[mel_bins, 1]``) mean and standard deviation."""

    mean: float | np.ndarray
    std: float | np.ndarray

    def as_dict(self) -> dict:
        return {"mean": np.asarray(self.mean).tolist(), "std": np.asarray(self.std).tolist()}


def num_frames(n_samples: int, cfg: DspConfig) -> int:
    return 1 + (n_samples - cfg.fft_size) // cfg.hop


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=8)
def _filterbank(sample_rate, fft_size, mel_bins, fmin, fmax):
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), mel_bins + 2))
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    fb = np.zeros((mel_bins, len(freqs)))
    for m in range(mel_bins):
        lo, mid, hi = edges[m : m + 3]
        rise = (freqs - lo) / (mid - lo)
        fall = (hi - freqs) / (hi - mid)
        # unit-area triangles
        fb[m] = np.maximum(0.0, np.minimum(rise, fall)) * 2.0 / (hi - lo)
    fb.setflags(write=False)
    edges.setflags(write=False)
    return fb, edges


def mel_filterbank(cfg: DspConfig) -> np.ndarray:
    """Triangular HTK-mel filters ``[mel_bins, fft_size//2 + 1]``, each of unit area in Hz."""
    fmax = cfg.sample_rate / 2 if cfg.fmax is None else cfg.fmax
    return _filterbank(cfg.sample_rate, cfg.fft_size, cfg.mel_bins, float(cfg.fmin), float(fmax))[0]


def mel_center_frequencies(cfg: DspConfig) -> np.ndarray:
    fmax = cfg.sample_rate / 2 if cfg.fmax is None else cfg.fmax
    return _filterbank(cfg.sample_rate, cfg.fft_size, cfg.mel_bins, float(cfg.fmin), float(fmax))[1][1:-1]


def stft_magnitude(pcm: np.ndarray, cfg: DspConfig) -> np.ndarray:
    """Magnitude STFT ``[frames, fft_size//2 + 1]``; no centering or padding."""
    pcm = np.asarray(pcm, dtype=np.float64)
    if pcm.ndim != 1:
        raise DataError("expected mono samples")
    if len(pcm) < cfg.fft_size:
        raise LengthError(f"need at least {cfg.fft_size} samples, got {len(pcm)}")
    frames = np.lib.stride_tricks.sliding_window_view(pcm, cfg.fft_size)[:: cfg.hop]
    win = get_window(cfg.window, cfg.fft_size)
    return np.abs(np.fft.rfft(frames * win, axis=1))


def mel_energy(pcm: np.ndarray, cfg: DspConfig) -> np.ndarray:
    """Pre-log mel magnitudes ``[mel_bins, frames]``."""
    return mel_filterbank(cfg) @ stft_magnitude(pcm, cfg).T


def melspectrogram(pcm: np.ndarray, cfg: DspConfig = DspConfig(), source_id: str = "") -> MelSpec:
    """``log(1 + mel(|STFT|))`` of a mono clip at ``cfg.sample_rate``."""
    return MelSpec(np.log1p(mel_energy(pcm, cfg)), source_id)


def fit_normalizer(specs, per_bin: bool = False) -> Normalizer:
    """Population mean/std over every cell of the given (training) spectrograms."""
    arrays = [s.values if isinstance(s, MelSpec) else np.asarray(s) for s in specs]
    if not arrays:
        raise DataError("fit_normalizer needs at least one spectrogram")
    stacked = np.concatenate([a.reshape(a.shape[0], -1) for a in arrays], axis=1)
    if per_bin:
        mean = stacked.mean(axis=1, keepdims=True)
        std = stacked.std(axis=1, keepdims=True)
        if np.any(std <= 0):
            raise DegenerateStatisticsError("a mel bin is constant over the training data")
        return Normalizer(mean, std)
    mean = float(stacked.mean())
    std = float(stacked.std())
    if not std > 0:
        raise DegenerateStatisticsError("training spectrograms are constant (std = 0)")
    return Normalizer(mean, std)


def apply_normalizer(m: MelSpec, n: Normalizer) -> MelSpec:
    return MelSpec((m.values - n.mean) / n.std, m.source_id)


def crop_offset(total_frames: int, frames: int, rng: np.random.Generator) -> int:
    if total_frames < frames:
        raise LengthError(f"spectrogram has {total_frames} frames, window needs {frames}")
    if total_frames == frames:
        return 0
    return int(rng.integers(0, total_frames - frames + 1))


def random_crop(m: MelSpec, frames: int, rng: np.random.Generator) -> MelSpec:
    """Contiguous ``frames``-wide window at a uniformly drawn offset."""
    start = crop_offset(m.frames, frames, rng)
    return MelSpec(m.values[:, start : start + frames], m.source_id)


def grid_windows(values: np.ndarray, frames: int) -> np.ndarray:
    """Non-overlapping windows starting at frame 0: ``[n_windows, mel_bins, frames]``."""
    total = values.shape[-1]
    if total < frames:
        raise LengthError(f"spectrogram has {total} frames, window needs {frames}")
    n = total // frames
    return np.stack([values[:, k * frames : (k + 1) * frames] for k in range(n)])


# --- files -------------------------------------------------------------------


def read_wav(path: str | PathLike, sample_rate: int = 22050) -> np.ndarray:
    """16-bit PCM mono WAV -> float64 samples in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1:
                raise DataError(f"{path}: expected mono, got {w.getnchannels()} channels")
            if w.getsampwidth() != 2:
                raise DataError(f"{path}: expected 16-bit samples")
            if w.getframerate() != sample_rate:
                raise DataError(f"{path}: expected {sample_rate} Hz, got {w.getframerate()}")
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: not a PCM WAV file ({exc})") from None
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path: str | PathLike, samples: np.ndarray, sample_rate: int = 22050) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


_MEL_MAGIC = b"MEL1"


def save_mel_cache(path: str | PathLike, values: np.ndarray) -> None:
    values = np.asarray(values)
    bins, frames = values.shape
    with open(path, "wb") as fh:
        fh.write(_MEL_MAGIC + struct.pack("<II", bins, frames))
        fh.write(values.astype("<f4").tobytes())


def load_mel_cache(path: str | PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MEL_MAGIC or len(blob) < 12:
        raise ParseError(f"{path}: not a MEL1 cache file")
    bins, frames = struct.unpack("<II", blob[4:12])
    if len(blob) != 12 + 4 * bins * frames:
        raise ParseError(f"{path}: payload size does not match header {bins}x{frames}")
    return np.frombuffer(blob[12:], dtype="<f4").reshape(bins, frames).astype(np.float64)
