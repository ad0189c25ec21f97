"""Plain-numpy float64 reference for one transformer block with global attention.

Written without the autodiff layer or the window machinery, so it can serve
as an oracle for them: with a single window covering the whole grid the
windowed block must reproduce it. The MAC tally counts the attention
products directly from their loop bounds.
"""

from __future__ import annotations

from collections import Counter

import numpy as np
from scipy.special import erf


def _ln(x, w, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def relative_bias(table: np.ndarray, H: int, W: int) -> np.ndarray:
    """(heads, HW, HW) bias for a full H x W grid, looked up pair by pair."""
    side = 2 * max(H, W) - 1
    N = H * W
    out = np.empty((table.shape[1], N, N))
    for i in range(N):
        ri, ci = divmod(i, W)
        for j in range(N):
            rj, cj = divmod(j, W)
            out[:, i, j] = table[(ri - rj + H - 1) * side + (ci - cj + W - 1)]
    return out


def _mm(a: np.ndarray, b: np.ndarray, macs: Counter | None, tag: str) -> np.ndarray:
    if macs is not None:
        macs[tag] += a.shape[0] * a.shape[1] * b.shape[1]
    return a @ b


def global_attention(x: np.ndarray, p: dict, prefix: str, heads: int,
                     bias: np.ndarray | None = None, macs: Counter | None = None) -> np.ndarray:
    """Multi-head self-attention over all N tokens of x (N, C)."""
    N, C = x.shape
    dh = C // heads
    w = lambda name: np.asarray(p[f"{prefix}.{name}"], dtype=np.float64)
    qkv = _mm(x, w("qkv.weight"), macs, "qkv") + w("qkv.bias")
    q, k, v = qkv[:, :C], qkv[:, C:2 * C], qkv[:, 2 * C:]
    out = np.empty((N, C))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        logits = _mm(q[:, sl] * dh ** -0.5, k[:, sl].T, macs, "qk")
        if bias is not None:
            logits = logits + bias[h]
        logits -= logits.max(-1, keepdims=True)
        a = np.exp(logits)
        a /= a.sum(-1, keepdims=True)
        out[:, sl] = _mm(a, v[:, sl], macs, "av")
    return _mm(out, w("proj.weight"), macs, "proj") + w("proj.bias")


def block(grid: np.ndarray, p: dict, prefix: str, heads: int, rel_bias: bool = True) -> np.ndarray:
    """Pre-norm residual block with global attention over an (H, W, C) grid."""
    H, W, C = grid.shape
    w = lambda name: np.asarray(p[f"{prefix}.{name}"], dtype=np.float64)
    x = np.asarray(grid, dtype=np.float64).reshape(H * W, C)
    bias = relative_bias(w("attn.rel_bias"), H, W) if rel_bias else None
    x = x + global_attention(_ln(x, w("norm1.weight"), w("norm1.bias")), p, f"{prefix}.attn", heads, bias)
    h = _ln(x, w("norm2.weight"), w("norm2.bias")) @ w("mlp.fc1.weight") + w("mlp.fc1.bias")
    h = 0.5 * h * (1.0 + erf(h / np.sqrt(2.0)))
    x = x + h @ w("mlp.fc2.weight") + w("mlp.fc2.bias")
    return x.reshape(H, W, C)
