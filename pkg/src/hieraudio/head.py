"""Token-semantic head: final tokens -> per-class presence map -> clip prediction.

Clip probabilities are the time-mean of per-step sigmoids (sigmoid first,
then mean). The frame-resolution view repeats each map step ``factor``
times (nearest neighbour).
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BCE_EPS = 1e-7


def ts_conv(tokens: Tensor, weight: Tensor, bias: Tensor | None, map_steps: int | None = None) -> Tensor:
    """Time-major tokens (B, T', F', 8D) -> presence-map logits (B, T', C).

    The kernel spans 3 time steps and every frequency row (padding (1, 0)),
    so the frequency axis collapses to one.
    """
    B, Tp, Fp, Dc = tokens.shape
    C, cin, kt, kf = weight.shape
    if cin != Dc:
        raise ad.ShapeError("ts_conv", tokens.shape, weight.shape)
    if kf != Fp or (map_steps is not None and Tp != map_steps):
        raise ValueError(f"ts_conv expects a time-major ({map_steps}, {kf}) token map, got ({Tp}, {Fp}); "
                         "restore it with grid_to_time_major first")
    x = ad.transpose(tokens, (0, 3, 1, 2))
    out = ad.conv2d(x, weight, bias, stride=1, padding=(kt // 2, 0))
    return ad.transpose(ad.reshape(out, (B, C, Tp)), (0, 2, 1))


def pool_clip(logits: Tensor) -> Tensor:
    """(B, T', C) logits -> (B, C) clip probabilities: mean over time of sigmoid."""
    return ad.mean(ad.sigmoid(logits), axis=-2)


def bce_loss(probs: Tensor, target) -> Tensor:
    """Mean binary cross-entropy over classes (and batch); probs clamped to [eps, 1-eps]."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if target.shape != probs.shape:
        raise ad.ShapeError("bce_loss", probs.shape, target.shape)
    if np.any(target < 0) or np.any(target > 1):
        raise ValueError("targets must lie in [0, 1]")
    y = target.astype(probs.dtype)
    p = ad.clip(probs, BCE_EPS, 1.0 - BCE_EPS)
    ll = ad.log(p) * y + ad.log(1.0 - p) * (1.0 - y)
    return -ad.mean(ll)


def presence_probs(logits) -> np.ndarray:
    x = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return ad.sigmoid(Tensor(x)).data


def interpolate_map(presence: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour upsampling along time: (T', C) -> (T' * factor, C)."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsampling factor must be a positive integer, got {factor}")
    return np.repeat(np.asarray(presence), int(factor), axis=-2)


def write_presence_csv(path, presence: np.ndarray) -> None:
    """One row per (time_step, class_id): ``time_step,class_id,prob``."""
    presence = np.asarray(presence)
    with open(Path(path), "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(["time_step", "class_id", "prob"])
        for t in range(presence.shape[0]):
            for c in range(presence.shape[1]):
                out.writerow([t, c, f"{float(presence[t, c]):.6g}"])
