"""Patch embedding and the patch-window token layout.

A (T, F) spectrogram becomes a (T/P, F/P) map of D-dim tokens. The map is
cut along time into ``n = T / patch_window_frames`` patch windows; the 1D
token order enumerates window, then time patch, then frequency patch
(frequency fastest). The 2D grid used by windowed attention stacks the
windows side by side along the frequency axis::

    row = tau                    (time patch inside its window)
    col = w * (F / P) + phi      (window, frequency patch)

so a grid of ``patch_window_frames / P`` rows by ``n * F / P`` columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig


@dataclass(frozen=True)
class GridLayout:
    """Bijection between (window, time patch, freq patch) and grid (row, col)."""

    rows: int
    freq_patches: int
    n_windows: int

    @classmethod
    def from_config(cls, cfg: ModelConfig, stage: int = 0) -> "GridLayout":
        s = 2 ** stage
        return cls(cfg.grid_rows // s, cfg.freq_patches // s, cfg.n_windows)

    @property
    def cols(self) -> int:
        return self.freq_patches * self.n_windows

    def to_grid(self, window: int, tau: int, phi: int) -> tuple[int, int]:
        return tau, window * self.freq_patches + phi

    def from_grid(self, row: int, col: int) -> tuple[int, int, int]:
        w, phi = divmod(col, self.freq_patches)
        return w, row, phi

    def sequence_index(self, window: int, tau: int, phi: int) -> int:
        return (window * self.rows + tau) * self.freq_patches + phi


def patch_embed(spec, weight: Tensor, bias: Tensor | None, P: int) -> Tensor:
    """Stride-P, kernel-P convolution: (B, T, F) -> time-major tokens (B, T/P, F/P, D)."""
    spec = ad.as_tensor(spec)
    if spec.ndim == 2:
        spec = ad.reshape(spec, (1,) + spec.shape)
    B, T, F = spec.shape
    if T % P or F % P:
        raise ad.ShapeError("patch_embed", (T, F), (P, P))
    x = ad.conv2d(ad.reshape(spec, (B, 1, T, F)), weight, bias, stride=P)
    return ad.transpose(x, (0, 2, 3, 1))


def order_tokens(tokens: Tensor, cfg: ModelConfig) -> Tensor:
    """Time-major token map (B, T/P, F/P, D) -> sequence (B, N, D) in window/time/freq order."""
    B, tp, fp, D = tokens.shape
    if tp * fp != (cfg.T // cfg.P) * cfg.freq_patches or fp != cfg.freq_patches:
        raise ad.ShapeError("order_tokens", tokens.shape, (cfg.T // cfg.P, cfg.freq_patches))
    R = cfg.grid_rows
    x = ad.reshape(tokens, (B, cfg.n_windows, R, fp, D))
    return ad.reshape(x, (B, cfg.n_windows * R * fp, D))


def unorder_tokens(seq: Tensor, cfg: ModelConfig) -> Tensor:
    B, N, D = seq.shape
    if N != (cfg.T // cfg.P) * cfg.freq_patches:
        raise ad.ShapeError("unorder_tokens", seq.shape, ((cfg.T // cfg.P) * cfg.freq_patches,))
    return ad.reshape(seq, (B, cfg.T // cfg.P, cfg.freq_patches, D))


def sequence_permutation(cfg: ModelConfig) -> np.ndarray:
    """perm[s] = time-major flat index (t * F/P + phi) of sequence position s."""
    layout = GridLayout.from_config(cfg)
    perm = np.empty(cfg.n_windows * layout.rows * layout.freq_patches, dtype=np.int64)
    for w in range(cfg.n_windows):
        for tau in range(layout.rows):
            for phi in range(layout.freq_patches):
                t = w * layout.rows + tau
                perm[layout.sequence_index(w, tau, phi)] = t * layout.freq_patches + phi
    return perm


def layout_grid(seq: Tensor, cfg: ModelConfig) -> Tensor:
    """Ordered sequence (B, N, D) -> grid (B, rows, cols, D)."""
    B, N, D = seq.shape
    R, fp, n = cfg.grid_rows, cfg.freq_patches, cfg.n_windows
    if N != R * fp * n:
        raise ad.ShapeError("layout_grid", seq.shape, (R, fp * n))
    x = ad.reshape(seq, (B, n, R, fp, D))
    x = ad.transpose(x, (0, 2, 1, 3, 4))
    return ad.reshape(x, (B, R, n * fp, D))


def grid_to_time_major(grid: Tensor, n_windows: int) -> Tensor:
    """Grid (B, r, c, D) at any stage -> time-major map (B, n*r, c/n, D)."""
    B, r, c, D = grid.shape
    if c % n_windows:
        raise ad.ShapeError("grid_to_time_major", grid.shape, (n_windows,))
    f = c // n_windows
    x = ad.reshape(grid, (B, r, n_windows, f, D))
    x = ad.transpose(x, (0, 2, 1, 3, 4))
    return ad.reshape(x, (B, n_windows * r, f, D))


def time_major_to_grid(tokens: Tensor, n_windows: int) -> Tensor:
    B, t, f, D = tokens.shape
    if t % n_windows:
        raise ad.ShapeError("time_major_to_grid", tokens.shape, (n_windows,))
    r = t // n_windows
    x = ad.reshape(tokens, (B, n_windows, r, f, D))
    x = ad.transpose(x, (0, 2, 1, 3, 4))
    return ad.reshape(x, (B, r, n_windows * f, D))
