"""Clip manifests and the feature-caching dataset built on them.

A manifest is a CSV with header ``clip_path,labels,events``. ``labels`` holds
semicolon-separated class ids; ``events`` holds optional ``class:onset:offset``
triples, also semicolon-separated. Relative clip paths resolve against the
manifest's directory.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .dsp import WavError, load_wav, log_mel, repeat_clip, resample

HEADER = ["clip_path", "labels", "events"]


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class EventInterval:
    class_id: int
    onset: float
    offset: float
    clip_id: str = ""

    def __post_init__(self):
        if not self.onset < self.offset:
            raise ValueError(f"event onset {self.onset} must precede offset {self.offset}")

    @property
    def duration(self) -> float:
        return self.offset - self.onset


@dataclass(frozen=True)
class ClipEntry:
    path: Path
    labels: tuple[int, ...]
    events: tuple[EventInterval, ...] = ()

    @property
    def clip_id(self) -> str:
        return self.path.stem


@dataclass
class Manifest:
    clips: list[ClipEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.clips)

    @property
    def labels(self) -> list[tuple[int, ...]]:
        return [c.labels for c in self.clips]

    def events(self) -> list[EventInterval]:
        return [e for c in self.clips for e in c.events]


def _fmt_time(x: float) -> str:
    return repr(round(float(x), 6))


def format_events(events) -> str:
    return ";".join(f"{e.class_id}:{_fmt_time(e.onset)}:{_fmt_time(e.offset)}" for e in events)


def load_manifest(path, n_classes: int | None = None) -> Manifest:
    """Parse and validate a manifest; paths must exist and class ids lie in [0, n_classes)."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    clips = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != HEADER[:2]:
            raise DatasetError(f"{path}: expected header {','.join(HEADER)}")
        for lineno, row in enumerate(reader, 2):
            if not row or not "".join(row).strip():
                continue
            try:
                clips.append(_parse_row(row, path.parent, n_classes))
            except (ValueError, IndexError) as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
    if not clips:
        raise DatasetError(f"manifest has no clips: {path}")
    return Manifest(clips)


def _parse_row(row, root: Path, n_classes: int | None) -> ClipEntry:
    clip = Path(row[0].strip())
    clip = clip if clip.is_absolute() else root / clip
    if not clip.is_file():
        raise ValueError(f"clip not found: {clip}")
    labels = tuple(sorted({int(x) for x in row[1].split(";") if x.strip()})) if len(row) > 1 else ()
    events = []
    if len(row) > 2 and row[2].strip():
        for item in row[2].split(";"):
            c, on, off = item.split(":")
            events.append(EventInterval(int(c), float(on), float(off), clip.stem))
    labels = tuple(sorted(set(labels) | {e.class_id for e in events}))
    if n_classes is not None and any(not 0 <= c < n_classes for c in labels):
        raise ValueError(f"class ids {labels} outside [0, {n_classes})")
    return ClipEntry(clip, labels, tuple(events))


def write_manifest(path, clips: list[ClipEntry]) -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        out = csv.writer(f, lineterminator="\n")
        out.writerow(HEADER)
        for c in clips:
            rel = c.path.relative_to(path.parent) if c.path.is_relative_to(path.parent) else c.path
            out.writerow([rel.as_posix(), ";".join(str(x) for x in c.labels), format_events(c.events)])


def clip_features(path, cfg: ModelConfig) -> np.ndarray:
    """WAV file -> (T, F) log-mel at the model's front-end settings.

    Clips are resampled to the model rate and tiled up to the model's clip
    length when shorter.
    """
    try:
        w = load_wav(path)
    except (WavError, OSError) as exc:
        raise DatasetError(f"{path}: {exc}") from None
    if w.sample_rate != cfg.sample_rate:
        w = resample(w, cfg.sample_rate)
    if w.seconds < cfg.clip_seconds:
        w = repeat_clip(w, cfg.clip_seconds)
    return log_mel(w, cfg.features()).frames


class ClipDataset:
    """Manifest clips with cached log-mel features and multi-hot targets."""

    def __init__(self, manifest: Manifest, cfg: ModelConfig):
        self.manifest = manifest
        self.cfg = cfg
        self._cache: dict[int, np.ndarray] = {}
        bad = [c.path for c in manifest.clips if any(not 0 <= k < cfg.C for k in c.labels)]
        if bad:
            raise DatasetError(f"labels outside [0, {cfg.C}) in {bad[0]}")

    def __len__(self):
        return len(self.manifest)

    @property
    def labels(self):
        return self.manifest.labels

    def features(self, i: int) -> np.ndarray:
        if i not in self._cache:
            self._cache[i] = clip_features(self.manifest.clips[i].path, self.cfg)
        return self._cache[i]

    def target(self, i: int) -> np.ndarray:
        y = np.zeros(self.cfg.C, dtype=np.float32)
        y[list(self.manifest.clips[i].labels)] = 1.0
        return y

    def targets(self) -> np.ndarray:
        return np.stack([self.target(i) for i in range(len(self))])
