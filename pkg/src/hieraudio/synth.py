"""Synthetic tone-burst clips with exact strong labels.

Each clip is white noise at -30 dBFS RMS plus one to three tone bursts of
distinct classes. Class k is a sine at the centre frequency of mel row
``2 * rev5(k) + 1`` of the default front end, where rev5 reverses the five
low bits of k. The bit reversal spreads the first few classes across the
whole band instead of packing them into the bottom rows.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .autodiff import Rng
from .dsp import FeatureConfig, Waveform, mel_band_edges, write_wav
from .manifest import ClipEntry, EventInterval, write_manifest

MAX_CLASSES = 32
NOISE_DBFS = -30.0
TONE_AMPLITUDE = 0.3
RAMP_SECONDS = 0.005
TIME_QUANTUM = 0.01


def _rev5(k: int) -> int:
    return int(f"{k:05b}"[::-1], 2)


def class_row(k: int) -> int:
    if not 0 <= k < MAX_CLASSES:
        raise ValueError(f"class id {k} outside [0, {MAX_CLASSES})")
    return 2 * _rev5(k) + 1


def class_frequency(k: int, features: FeatureConfig = FeatureConfig()) -> float:
    edges = mel_band_edges(features.n_mels, features.fmin, features.fmax)
    return float(edges[class_row(k) + 1])


def tone_burst(freq: float, onset: float, offset: float, n: int, sample_rate: int, phase: float) -> np.ndarray:
    """Sine on [onset, offset) with short raised-cosine ramps, zero elsewhere."""
    out = np.zeros(n)
    start, stop = int(round(onset * sample_rate)), min(n, int(round(offset * sample_rate)))
    t = np.arange(stop - start) / sample_rate
    burst = TONE_AMPLITUDE * np.sin(2 * np.pi * freq * t + phase)
    ramp = min(int(RAMP_SECONDS * sample_rate), len(burst) // 2)
    if ramp:
        env = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        burst[:ramp] *= env
        burst[-ramp:] *= env[::-1]
    out[start:stop] = burst
    return out


def synth_clip(gen: np.random.Generator, n_classes: int, seconds: float, sample_rate: int,
               first_class: int | None = None, clip_id: str = "") -> tuple[Waveform, list[EventInterval]]:
    n = int(round(seconds * sample_rate))
    x = gen.normal(scale=10.0 ** (NOISE_DBFS / 20.0), size=n)
    n_events = int(gen.integers(1, min(3, n_classes) + 1))
    classes = [int(c) for c in gen.permutation(n_classes)]
    if first_class is not None:
        classes.remove(first_class)
        classes.insert(0, first_class)
    events = []
    for cls in sorted(classes[:n_events]):
        dur = gen.uniform(0.25, 0.5) * seconds
        onset = round(gen.uniform(0.0, seconds - dur) / TIME_QUANTUM) * TIME_QUANTUM
        offset = min(seconds, round((onset + dur) / TIME_QUANTUM) * TIME_QUANTUM)
        onset, offset = round(onset, 2), round(offset, 2)
        x += tone_burst(class_frequency(cls), onset, offset, n, sample_rate, gen.uniform(0, 2 * np.pi))
        events.append(EventInterval(cls, onset, offset, clip_id))
    return Waveform(np.clip(x, -1.0, 32767 / 32768), sample_rate), events


def make_dataset(out_dir, n_clips: int, n_classes: int, seed: int, seconds: float = 10.0,
                 sample_rate: int = 32000, prefix: str = "clip") -> Path:
    """Write ``n_clips`` WAVs under ``out_dir/clips`` and ``out_dir/manifest.csv``.

    The first event of clip i has class ``i % n_classes``, so every class
    appears once there are at least ``n_classes`` clips.
    """
    if not 1 <= n_classes <= MAX_CLASSES:
        raise ValueError(f"n_classes must lie in [1, {MAX_CLASSES}], got {n_classes}")
    if n_clips < 1:
        raise ValueError("n_clips must be positive")
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    rng = Rng(seed)
    entries = []
    for i in range(n_clips):
        clip_id = f"{prefix}_{i:04d}"
        wave, events = synth_clip(rng.stream("clip", i), n_classes, seconds, sample_rate, i % n_classes, clip_id)
        path = out / "clips" / f"{clip_id}.wav"
        write_wav(path, wave)
        entries.append(ClipEntry(path, tuple(e.class_id for e in events), tuple(events)))
    manifest = out / "manifest.csv"
    write_manifest(manifest, entries)
    return manifest
