"""Waveform preprocessing chain and log-mel frontend."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy import signal
from scipy.io import wavfile

logger = logging.getLogger(__name__)

MIN_SAMPLE_RATE = 8000
TARGET_SAMPLE_RATE = 32000
MIN_CLIP_SECONDS = 15.0
MAX_CLIP_SECONDS = 30.0
SEGMENT_SEARCH_HOP = 0.1
RESAMPLER_TAPS = 64
RESAMPLER_BETA = 8.0


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class MelFrames:
    frames: np.ndarray  # (T, mel_bins)
    hop: float
    mel_bins: int

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class AudioConfig:
    threshold_db: float = 60.0
    target_rate: int = TARGET_SAMPLE_RATE
    min_duration: float = MIN_CLIP_SECONDS
    max_duration: float = MAX_CLIP_SECONDS
    fade_duration: float = 0.016
    hop: float = 0.02
    mel_bins: int = 64

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "AudioConfig":
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown audio config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "AudioConfig":
        import yaml

        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        return cls.from_dict(data.get("audio", data))

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# WAV I/O
# --------------------------------------------------------------------------


def read_wav(path: Union[str, Path]) -> Waveform:
    """Load 16/32-bit integer or float PCM; multichannel input is averaged to mono."""
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.floating):
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV sample type {data.dtype}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return Waveform(samples, int(rate))


def write_wav(path: Union[str, Path], w: Waveform, pcm16: bool = True) -> None:
    if pcm16:
        data = np.round(np.clip(w.samples, -1.0, 32767 / 32768) * 32768.0).astype("<i2")
    else:
        data = w.samples.astype("<f4")
    wavfile.write(str(path), w.sample_rate, data)


# --------------------------------------------------------------------------
# Preprocessing steps
# --------------------------------------------------------------------------


def peak_normalize(w: Waveform) -> Waveform:
    peak = np.max(np.abs(w.samples)) if len(w) else 0.0
    if peak == 0.0:
        return w
    # division (not multiplication by 1/peak) keeps the peak at exactly 1.0
    return Waveform(w.samples / peak, w.sample_rate)


def trim_silence(w: Waveform, threshold_db: float = 60.0) -> Waveform:
    """Drop leading/trailing samples quieter than ``threshold_db`` below the peak."""
    if len(w) == 0:
        raise ValueError("cannot trim an empty waveform")
    mag = np.abs(w.samples)
    peak = mag.max()
    if peak == 0.0:
        return Waveform(np.zeros(0), w.sample_rate)
    loud = np.flatnonzero(mag >= peak * 10.0 ** (-threshold_db / 20.0))
    return Waveform(w.samples[loud[0]:loud[-1] + 1], w.sample_rate)


def _sinc_filter(up: int, down: int) -> np.ndarray:
    # RESAMPLER_TAPS input-rate taps per output sample, in the upsampled domain
    rate = max(up, down)
    numtaps = RESAMPLER_TAPS * rate + 1
    return signal.firwin(numtaps, 1.0 / rate, window=("kaiser", RESAMPLER_BETA))


def resample(w: Waveform, target_rate: int = TARGET_SAMPLE_RATE) -> Waveform:
    """Band-limited (Kaiser windowed-sinc) polyphase rate conversion."""
    if w.sample_rate < MIN_SAMPLE_RATE:
        raise ValueError(f"sample rate {w.sample_rate} Hz below supported minimum "
                         f"{MIN_SAMPLE_RATE} Hz")
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if w.sample_rate == target_rate:
        return Waveform(w.samples.copy(), target_rate)
    ratio = Fraction(target_rate, w.sample_rate)
    up, down = ratio.numerator, ratio.denominator
    out = signal.resample_poly(w.samples, up, down, window=_sinc_filter(up, down))
    return Waveform(out, target_rate)


def select_energy_segment(w: Waveform, target_duration: Optional[float] = None,
                          rng_seed: int = 0, max_duration: float = MAX_CLIP_SECONDS,
                          min_duration: float = MIN_CLIP_SECONDS,
                          hop: float = SEGMENT_SEARCH_HOP) -> Waveform:
    """Cut the highest-energy window from clips longer than ``max_duration``.

    Candidate windows start on a ``hop`` grid; ties go to the earliest start.
    """
    if w.duration <= max_duration:
        return w
    if target_duration is None:
        target_duration = float(np.random.default_rng(rng_seed).uniform(min_duration,
                                                                        max_duration))
    length = int(round(target_duration * w.sample_rate))
    if length >= len(w):
        return w
    step = max(1, int(round(hop * w.sample_rate)))
    starts = np.arange(0, len(w) - length + 1, step)
    power = np.concatenate([[0.0], np.cumsum(w.samples ** 2)])
    energy = power[starts + length] - power[starts]
    # cumulative-sum differences carry rounding noise; treat near-equal as ties
    best = starts[np.flatnonzero(energy >= energy.max() * (1.0 - 1e-9))[0]]
    return Waveform(w.samples[best:best + length], w.sample_rate)


def apply_edge_fade(w: Waveform, fade_duration: float = 0.016) -> Waveform:
    """Multiply the edges by the rising/falling halves of a Hamming window."""
    n = int(round(fade_duration * w.sample_rate))
    if len(w) < 2 * n:
        raise ValueError(f"clip of {len(w)} samples shorter than two fade windows ({2 * n})")
    if n == 0:
        return w
    window = np.hamming(2 * n)
    out = w.samples.copy()
    out[:n] *= window[:n]
    out[-n:] *= window[n:]
    return Waveform(out, w.sample_rate)


def preprocess(w: Waveform, config: Optional[AudioConfig] = None,
               rng_seed: int = 0) -> Optional[Waveform]:
    """Full chain: normalize, trim, length gate, resample, energy segment, fade.

    Returns ``None`` when the trimmed clip is shorter than the minimum duration.
    """
    cfg = config or AudioConfig()
    w = peak_normalize(w)
    w = trim_silence(w, cfg.threshold_db)
    if w.duration < cfg.min_duration:
        logger.info("discarding clip: %.2f s after trimming", w.duration)
        return None
    w = resample(w, cfg.target_rate)
    w = select_energy_segment(w, None, rng_seed, cfg.max_duration, cfg.min_duration)
    return apply_edge_fade(w, cfg.fade_duration)


# --------------------------------------------------------------------------
# Mel frontend
# --------------------------------------------------------------------------


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, mel_bins: int,
                   fmin: float = 0.0, fmax: Optional[float] = None) -> np.ndarray:
    """Triangular HTK-scale filters, shape (mel_bins, n_fft // 2 + 1)."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), mel_bins + 2))
    freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_frontend(w: Waveform, hop: float = 0.02, mel_bins: int = 64) -> MelFrames:
    """log(1 + mel power) at ``hop`` spacing; T = ceil(num_samples / hop_samples)."""
    if len(w) == 0:
        raise ValueError("cannot compute features of an empty waveform")
    hop_len = int(round(hop * w.sample_rate))
    if hop_len < 1:
        raise ValueError("hop shorter than one sample")
    win_len = 2 * hop_len
    n_fft = 1 << (win_len - 1).bit_length()
    n_frames = math.ceil(len(w) / hop_len)
    # frame t is centred on the middle of its hop interval [t*hop, (t+1)*hop)
    pad_left = (win_len - hop_len) // 2
    total = (n_frames - 1) * hop_len + win_len
    padded = np.zeros(total)
    padded[pad_left:pad_left + len(w)] = w.samples[:total - pad_left]
    frames = np.lib.stride_tricks.sliding_window_view(padded, win_len)[::hop_len][:n_frames]
    spec = np.fft.rfft(frames * np.hanning(win_len), n=n_fft, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    mel = power @ mel_filterbank(w.sample_rate, n_fft, mel_bins).T
    return MelFrames(np.log1p(np.maximum(mel, 0.0)), hop, mel_bins)
