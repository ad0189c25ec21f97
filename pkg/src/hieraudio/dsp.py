"""Waveform I/O and the log-mel frontend.

Frontend constants: centered STFT with reflect padding of half a window,
periodic Hann window, power spectrum, HTK mel scale between ``fmin`` and
``fmax`` with Slaney area normalization, ``log(mel + 1e-10)``. The time axis
keeps ``len // hop`` frames (1000 for 10 s at 32 kHz / hop 320; the final
centered frame is dropped) and is then padded with ``log(1e-10)`` or
truncated to the configured frame count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal

LOG_EPS = 1e-10


class WavError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be mono, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def seconds(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (time, mel) float32
    hop_seconds: float
    sample_rate: int
    valid_frames: int | None = None

    @property
    def shape(self):
        return self.frames.shape


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 32000
    window_size: int = 1024
    hop_size: int = 320
    n_mels: int = 64
    frames: int = 1024
    fmin: float = 50.0
    fmax: float = 14000.0


def load_wav(path) -> Waveform:
    """Read 16-bit PCM or 32-bit float WAV; stereo is averaged to mono."""
    path = Path(path)
    try:
        sr, data = scipy.io.wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:  # scipy raises ValueError and struct errors for bad headers
        raise WavError(f"{path}: malformed WAV ({exc})") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise WavError(f"{path}: unsupported encoding {data.dtype} (need 16-bit PCM or 32-bit float)")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise WavError(f"{path}: empty audio")
    return Waveform(x, int(sr))


def write_wav(path, w: Waveform) -> None:
    """Write 16-bit PCM, rounding to nearest and clipping to the int16 range."""
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    scipy.io.wavfile.write(Path(path), w.sample_rate, pcm)


def hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(w: Waveform | np.ndarray, window_size: int = 1024, hop_size: int = 320) -> np.ndarray:
    """Complex STFT frames, shape (n_frames, window_size // 2 + 1)."""
    if window_size < hop_size:
        raise ValueError(f"window_size {window_size} smaller than hop_size {hop_size}")
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    pad = window_size // 2
    if len(x) <= pad:
        raise ValueError(f"waveform of {len(x)} samples is shorter than one window after padding")
    xp = np.pad(x, pad, mode="reflect")
    n_frames = (len(xp) - window_size) // hop_size + 1
    frames = np.lib.stride_tricks.sliding_window_view(xp, window_size)[::hop_size][:n_frames]
    return np.fft.rfft(frames * hann(window_size), axis=-1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """The n_mels + 2 Hz points (lower edge, center, upper edge chain)."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


def mel_filterbank(n_fft: int, n_mels: int, sample_rate: int,
                   fmin: float = 50.0, fmax: float = 14000.0) -> np.ndarray:
    """Triangular HTK-mel filters over rfft bins, shape (n_mels, n_fft // 2 + 1)."""
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise ValueError(f"need 0 <= fmin < fmax <= Nyquist, got {fmin}, {fmax}")
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_band_edges(n_mels, fmin, fmax)
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lo) / (center - lo)
    falling = (hi - bins) / (hi - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb *= 2.0 / (hi - lo)
    empty = np.flatnonzero(fb.max(axis=1) <= 0)
    if empty.size:
        raise ValueError(f"n_mels={n_mels} too large for {n_fft}-point FFT: filter {int(empty[0])} is empty")
    return fb


def log_mel(w: Waveform, cfg: FeatureConfig = FeatureConfig()) -> MelSpectrogram:
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(f"waveform at {w.sample_rate} Hz, frontend expects {cfg.sample_rate} Hz")
    spec = stft(w, cfg.window_size, cfg.hop_size)
    power = spec.real ** 2 + spec.imag ** 2
    fb = mel_filterbank(cfg.window_size, cfg.n_mels, cfg.sample_rate, cfg.fmin, cfg.fmax)
    mel = np.log(power @ fb.T + LOG_EPS)
    keep = min(len(mel), len(w.samples) // cfg.hop_size)
    mel = mel[:keep]
    valid = min(keep, cfg.frames)
    out = np.full((cfg.frames, cfg.n_mels), math.log(LOG_EPS), dtype=np.float64)
    out[:valid] = mel[:valid]
    return MelSpectrogram(out.astype(np.float32), cfg.hop_size / cfg.sample_rate, cfg.sample_rate, valid)


def repeat_clip(w: Waveform, target_seconds: float) -> Waveform:
    """Tile a short clip end to end up to ``target_seconds``; zero-pad the remainder."""
    n = len(w.samples)
    if n == 0:
        raise ValueError("cannot repeat an empty clip")
    target = int(round(target_seconds * w.sample_rate))
    if target < n:
        raise ValueError(f"target {target_seconds} s is shorter than the clip ({w.seconds} s)")
    reps = target // n
    out = np.zeros(target, dtype=np.float64)
    out[:reps * n] = np.tile(w.samples, reps)
    return Waveform(out, w.sample_rate)


def resample(w: Waveform, sample_rate: int) -> Waveform:
    """Polyphase rational resampling."""
    if sample_rate == w.sample_rate:
        return w
    g = math.gcd(sample_rate, w.sample_rate)
    y = scipy.signal.resample_poly(w.samples, sample_rate // g, w.sample_rate // g)
    return Waveform(y, sample_rate)
