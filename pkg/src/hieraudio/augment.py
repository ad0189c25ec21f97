"""Training-time augmentation and sampling: mixup, band masking, class-balanced draws."""

from __future__ import annotations

from collections.abc import Iterator, Sequence
from dataclasses import dataclass

import numpy as np

from .dsp import MelSpectrogram


@dataclass(frozen=True)
class MixupParams:
    alpha: float = 0.5
    lam: float | None = None


@dataclass(frozen=True)
class MaskSpec:
    time_mask_max: int = 128
    freq_mask_max: int = 16
    num_masks: int = 1


def _frames(spec) -> np.ndarray:
    return spec.frames if isinstance(spec, MelSpectrogram) else np.asarray(spec)


def sample_lambda(gen: np.random.Generator, alpha: float = 0.5) -> float:
    """Mixing weight drawn from Beta(alpha, alpha)."""
    if alpha <= 0:
        raise ValueError(f"mixup alpha must be positive, got {alpha}")
    return float(gen.beta(alpha, alpha))


def mixup(a, ya, b, yb, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Convex combination ``lam * a + (1 - lam) * b`` of two examples and their targets."""
    a, b = _frames(a), _frames(b)
    ya, yb = np.asarray(ya), np.asarray(yb)
    if a.shape != b.shape or ya.shape != yb.shape:
        raise ValueError(f"mixup shape mismatch: {a.shape}/{b.shape}, targets {ya.shape}/{yb.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixup weight must lie in [0, 1], got {lam}")
    if lam == 1.0:
        return a.copy(), ya.copy()
    spec = (lam * a + (1.0 - lam) * b).astype(a.dtype)
    target = (lam * ya + (1.0 - lam) * yb).astype(np.result_type(ya, yb, np.float32))
    return spec, target


def apply_masks(spec, t0: int, u: int, f0: int, v: int) -> np.ndarray:
    """Fill time rows [t0, t0+u) and frequency columns [f0, f0+v) with the spectrogram mean."""
    x = _frames(spec)
    out = x.copy()
    fill = x.mean(dtype=np.float64)
    out[t0:t0 + u, :] = fill
    out[:, f0:f0 + v] = fill
    return out


def spec_mask(spec, ms: MaskSpec, gen: np.random.Generator) -> np.ndarray:
    """One time band of width ~U{0..time_mask_max} and one frequency band ~U{0..freq_mask_max}."""
    x = _frames(spec)
    T, F = x.shape
    if ms.time_mask_max > T or ms.freq_mask_max > F:
        raise ValueError(f"mask widths ({ms.time_mask_max}, {ms.freq_mask_max}) exceed spectrogram {x.shape}")
    out = x
    for _ in range(ms.num_masks):
        u = int(gen.integers(0, ms.time_mask_max + 1))
        t0 = int(gen.integers(0, T - u + 1))
        v = int(gen.integers(0, ms.freq_mask_max + 1))
        f0 = int(gen.integers(0, F - v + 1))
        out = apply_masks(out, t0, u, f0, v)
    return out


def balanced_sampler(labels: Sequence[Sequence[int]], n_classes: int,
                     gen: np.random.Generator) -> Iterator[int]:
    """Endless clip indices: pick a class uniformly, then one of its clips uniformly."""
    by_class: list[list[int]] = [[] for _ in range(n_classes)]
    for i, clip_labels in enumerate(labels):
        for c in set(clip_labels):
            by_class[c].append(i)
    empty = [c for c, clips in enumerate(by_class) if not clips]
    if empty:
        raise ValueError(f"balanced sampling needs at least one clip per class; none for classes {empty}")
    while True:
        clips = by_class[int(gen.integers(n_classes))]
        yield clips[int(gen.integers(len(clips)))]


def uniform_sampler(n_clips: int, gen: np.random.Generator) -> Iterator[int]:
    if n_clips < 1:
        raise ValueError("cannot sample from an empty dataset")
    while True:
        yield int(gen.integers(n_clips))


@dataclass(frozen=True)
class AugmentFlags:
    train: bool = False
    mixup: bool = True
    mixup_alpha: float = 0.5
    spec_mask: bool = True
    masks: MaskSpec = MaskSpec()


def build_batch(indices: Sequence[int], dataset, flags: AugmentFlags = AugmentFlags(),
                gen: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stack features (B, T, F) and targets (B, C); augment only when ``flags.train``.

    Mixup pairs each row with a row of a random permutation of the batch,
    using a fresh weight per row; masking follows mixup.
    """
    specs = np.stack([dataset.features(i) for i in indices])
    targets = np.stack([dataset.target(i) for i in indices]).astype(np.float32)
    if not flags.train:
        return specs, targets
    if gen is None:
        raise ValueError("training batches need a random generator")
    if flags.mixup:
        partner = gen.permutation(len(indices))
        mixed = [mixup(specs[i], targets[i], specs[j], targets[j], sample_lambda(gen, flags.mixup_alpha))
                 for i, j in enumerate(partner)]
        specs = np.stack([m[0] for m in mixed])
        targets = np.stack([m[1] for m in mixed]).astype(np.float32)
    if flags.spec_mask:
        specs = np.stack([spec_mask(s, flags.masks, gen) for s in specs])
    return specs, targets
