"""Hierarchical windowed-attention encoder.

Four groups of pre-norm transformer blocks over the token grid. Inside a
group, even blocks attend within non-overlapping MxM windows and odd blocks
within windows cyclically shifted by M//2 (with a mask separating tokens that
were not neighbours before the roll). A patch merge after every group but the
last halves both grid extents and doubles the channel dimension.

When a stage grid is no larger than M along some axis, that stage uses a
single window of side ``min(rows, cols)`` and no shift.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .config import ModelConfig

MASK_VALUE = -1e4
INIT_STD = 0.02


@dataclass(frozen=True)
class StageSpec:
    rows: int
    cols: int
    dim: int
    heads: int
    window: int
    shifts: tuple[int, ...]
    merge: bool


def stage_plan(cfg: ModelConfig) -> list[StageSpec]:
    plan = []
    rows, cols = cfg.grid_rows, cfg.grid_cols
    for g, depth in enumerate(cfg.depths):
        if min(rows, cols) <= cfg.M:
            window, half = min(rows, cols), 0
        else:
            window, half = cfg.M, cfg.M // 2
        if rows % window or cols % window:
            raise ad.ShapeError("stage_plan", (rows, cols), (window, window))
        shifts = tuple(0 if i % 2 == 0 else half for i in range(depth))
        last = g == len(cfg.depths) - 1
        plan.append(StageSpec(rows, cols, cfg.stage_dim(g), cfg.heads[g], window, shifts, not last))
        if not last:
            rows, cols = rows // 2, cols // 2
    return plan


# ----------------------------------------------------------------- windows


def window_partition(x: Tensor, M: int) -> Tensor:
    """(B, H, W, C) -> (B * H/M * W/M, M*M, C), windows in row-major order."""
    B, H, W, C = x.shape
    if H % M or W % M:
        raise ad.ShapeError("window_partition", (H, W), (M, M))
    x = ad.reshape(x, (B, H // M, M, W // M, M, C))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (B * (H // M) * (W // M), M * M, C))


def window_reverse(windows: Tensor, M: int, B: int, H: int, W: int) -> Tensor:
    C = windows.shape[-1]
    x = ad.reshape(windows, (B, H // M, W // M, M, M, C))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (B, H, W, C))


def region_labels(H: int, W: int, M: int, shift: int) -> np.ndarray:
    """Label each cell of the rolled grid by which pre-roll strip it came from."""
    labels = np.zeros((H, W), dtype=np.int64)
    if shift == 0:
        return labels
    cuts = (slice(0, -M), slice(-M, -shift), slice(-shift, None))
    n = 0
    for hs in cuts:
        for ws in cuts:
            labels[hs, ws] = n
            n += 1
    return labels


def shift_mask(H: int, W: int, M: int, shift: int) -> np.ndarray | None:
    """Additive attention mask (n_windows, M*M, M*M): 0 allowed, MASK_VALUE blocked."""
    if shift == 0:
        return None
    lab = region_labels(H, W, M, shift)
    lab = lab.reshape(H // M, M, W // M, M).transpose(0, 2, 1, 3).reshape(-1, M * M)
    return np.where(lab[:, :, None] != lab[:, None, :], MASK_VALUE, 0.0)


@dataclass
class AttentionWindowSet:
    windows: Tensor  # (B * k, M*M, C)
    M: int
    shift: int
    mask: np.ndarray | None  # (k, M*M, M*M)
    grid_shape: tuple[int, int, int]  # (B, H, W)

    @property
    def k(self) -> int:
        B, H, W = self.grid_shape
        return (H // self.M) * (W // self.M)


def partition_windows(grid: Tensor, M: int, shift: int = 0) -> AttentionWindowSet:
    B, H, W, _ = grid.shape
    if shift not in (0, M // 2):
        raise ValueError(f"shift must be 0 or {M // 2}, got {shift}")
    if H % M or W % M:
        raise ad.ShapeError("window_partition", (H, W), (M, M))
    x = ad.roll(grid, (-shift, -shift), axis=(1, 2)) if shift else grid
    return AttentionWindowSet(window_partition(x, M), M, shift, shift_mask(H, W, M, shift), (B, H, W))


def reverse_windows(ws: AttentionWindowSet, windows: Tensor | None = None) -> Tensor:
    B, H, W = ws.grid_shape
    x = window_reverse(ws.windows if windows is None else windows, ws.M, B, H, W)
    return ad.roll(x, (ws.shift, ws.shift), axis=(1, 2)) if ws.shift else x


def relative_position_index(M: int) -> np.ndarray:
    """(M*M, M*M) index into a (2M-1)^2 bias table for every query/key pair."""
    coords = np.stack(np.meshgrid(np.arange(M), np.arange(M), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (M - 1)
    return rel[0] * (2 * M - 1) + rel[1]


# ----------------------------------------------------------------- layers


def window_attention(windows: Tensor, params: dict, prefix: str, heads: int, M: int,
                     mask: np.ndarray | None = None, return_attn: bool = False):
    """Multi-head self-attention inside each window of (B*k, M*M, C)."""
    Bk, N, C = windows.shape
    if C % heads:
        raise ad.ShapeError("window_attention", (C,), (heads,))
    dh = C // heads
    qkv = ad.linear(windows, params[f"{prefix}.qkv.weight"], params[f"{prefix}.qkv.bias"], tag="qkv")
    qkv = ad.transpose(ad.reshape(qkv, (Bk, N, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    q = q * (dh ** -0.5)
    attn = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)), tag="qk")
    table = params.get(f"{prefix}.rel_bias")
    if table is not None:
        bias = ad.take(table, relative_position_index(M).reshape(-1))
        attn = attn + ad.transpose(ad.reshape(bias, (N, N, heads)), (2, 0, 1))
    if mask is not None:
        k_win = mask.shape[0]
        attn = ad.reshape(attn, (Bk // k_win, k_win, heads, N, N))
        attn = attn + mask[None, :, None].astype(attn.dtype)
        attn = ad.reshape(attn, (Bk, heads, N, N))
    attn = ad.softmax(attn)
    out = ad.matmul(attn, v, tag="av")
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (Bk, N, C))
    out = ad.linear(out, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"], tag="proj")
    return (out, attn) if return_attn else out


def mlp(x: Tensor, params: dict, prefix: str) -> Tensor:
    h = ad.gelu(ad.linear(x, params[f"{prefix}.fc1.weight"], params[f"{prefix}.fc1.bias"]))
    return ad.linear(h, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"])


def window_attention_block(grid: Tensor, params: dict, prefix: str, heads: int, M: int,
                           shift: int = 0) -> Tensor:
    """Pre-norm residual block: x + WindowMSA(LN(x)), then x + MLP(LN(x))."""
    h = ad.layer_norm(grid, params[f"{prefix}.norm1.weight"], params[f"{prefix}.norm1.bias"])
    ws = partition_windows(h, M, shift)
    attn = window_attention(ws.windows, params, f"{prefix}.attn", heads, M, ws.mask)
    x = grid + reverse_windows(ws, attn)
    h = ad.layer_norm(x, params[f"{prefix}.norm2.weight"], params[f"{prefix}.norm2.bias"])
    return x + mlp(h, params, f"{prefix}.mlp")


def patch_merge(grid: Tensor, params: dict, prefix: str) -> Tensor:
    """(B, H, W, C) -> (B, H/2, W/2, 2C): concat 2x2 neighbours, LN, linear 4C -> 2C."""
    B, H, W, C = grid.shape
    if H % 2 or W % 2:
        raise ad.ShapeError("patch_merge", (H, W), (2, 2))
    parts = [grid[:, 0::2, 0::2], grid[:, 1::2, 0::2], grid[:, 0::2, 1::2], grid[:, 1::2, 1::2]]
    x = ad.concat(parts, axis=-1)
    x = ad.layer_norm(x, params[f"{prefix}.norm.weight"], params[f"{prefix}.norm.bias"])
    return ad.matmul(x, params[f"{prefix}.reduction.weight"])


def forward_encoder(grid: Tensor, cfg: ModelConfig, params: dict) -> Tensor:
    """Token grid (B, rows, cols, D) -> final grid (B, rows/8, cols/8, 8D), layer-normed."""
    x = grid
    for g, stage in enumerate(stage_plan(cfg)):
        if x.shape[1:] != (stage.rows, stage.cols, stage.dim):
            raise ad.ShapeError("forward_encoder", x.shape[1:], (stage.rows, stage.cols, stage.dim))
        for i, shift in enumerate(stage.shifts):
            x = window_attention_block(x, params, f"layers.{g}.blocks.{i}", stage.heads, stage.window, shift)
        if stage.merge:
            x = patch_merge(x, params, f"layers.{g}.merge")
    return ad.layer_norm(x, params["norm.weight"], params["norm.bias"])


# ----------------------------------------------------------------- parameters


def encoder_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every encoder parameter name and shape, in a fixed order."""
    D, P = cfg.D, cfg.P
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (D, 1, P, P),
        "patch_embed.bias": (D,),
        "patch_norm.weight": (D,),
        "patch_norm.bias": (D,),
    }
    if cfg.abs_pos_embed:
        shapes["pos_embed"] = (cfg.T // P, cfg.freq_patches, D)
    for g, st in enumerate(stage_plan(cfg)):
        d, hidden = st.dim, int(st.dim * cfg.mlp_ratio)
        for i in range(len(st.shifts)):
            p = f"layers.{g}.blocks.{i}"
            shapes[f"{p}.norm1.weight"] = (d,)
            shapes[f"{p}.norm1.bias"] = (d,)
            shapes[f"{p}.attn.qkv.weight"] = (d, 3 * d)
            shapes[f"{p}.attn.qkv.bias"] = (3 * d,)
            if cfg.rel_pos_bias:
                shapes[f"{p}.attn.rel_bias"] = ((2 * st.window - 1) ** 2, st.heads)
            shapes[f"{p}.attn.proj.weight"] = (d, d)
            shapes[f"{p}.attn.proj.bias"] = (d,)
            shapes[f"{p}.norm2.weight"] = (d,)
            shapes[f"{p}.norm2.bias"] = (d,)
            shapes[f"{p}.mlp.fc1.weight"] = (d, hidden)
            shapes[f"{p}.mlp.fc1.bias"] = (hidden,)
            shapes[f"{p}.mlp.fc2.weight"] = (hidden, d)
            shapes[f"{p}.mlp.fc2.bias"] = (d,)
        if st.merge:
            shapes[f"layers.{g}.merge.norm.weight"] = (4 * d,)
            shapes[f"layers.{g}.merge.norm.bias"] = (4 * d,)
            shapes[f"layers.{g}.merge.reduction.weight"] = (4 * d, 2 * d)
    shapes["norm.weight"] = (cfg.final_dim,)
    shapes["norm.bias"] = (cfg.final_dim,)
    return shapes


def init_value(name: str, shape, gen: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Truncated normal (std 0.02) for weights, ones for norm scales, zeros otherwise."""
    parts = name.split(".")
    leaf = parts[-1]
    if leaf == "weight" and len(parts) > 1 and "norm" in parts[-2]:
        return np.ones(shape, dtype=dtype)
    if leaf == "weight" or name == "pos_embed":
        return ad.trunc_normal(gen, shape, INIT_STD, dtype=dtype)
    return np.zeros(shape, dtype=dtype)


def count_encoder_params(cfg: ModelConfig) -> int:
    """Closed-form parameter count of the encoder (patch embed through final norm)."""
    D, P, r = cfg.D, cfg.P, cfg.mlp_ratio
    total = D * P * P + D + 2 * D
    if cfg.abs_pos_embed:
        total += (cfg.T // P) * cfg.freq_patches * D
    for st in stage_plan(cfg):
        d, hidden = st.dim, int(st.dim * r)
        block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * hidden + hidden) + (hidden * d + d)
        if cfg.rel_pos_bias:
            block += (2 * st.window - 1) ** 2 * st.heads
        total += len(st.shifts) * block
        if st.merge:
            total += 8 * d + 8 * d * d
    return total + 2 * cfg.final_dim


# ----------------------------------------------------------------- cost model


@dataclass(frozen=True)
class ComplexityQuery:
    f: int
    t: int
    D: int
    M: int

    def __post_init__(self):
        if min(self.f, self.t, self.D, self.M) <= 0:
            raise ValueError("f, t, D, M must be positive")
        if (self.f * self.t) % (self.M * self.M):
            raise ValueError(f"M^2={self.M * self.M} must divide f*t={self.f * self.t}")


def complexity(q: ComplexityQuery) -> dict:
    """Two-term attention costs: global (ftD^2, (ft)^2 D) and windowed (ftD^2, M^2 ft D)."""
    ft = q.f * q.t
    ga = (ft * q.D ** 2, ft * ft * q.D)
    wa = (ft * q.D ** 2, q.M ** 2 * ft * q.D)
    ratio = Fraction(ga[1], wa[1])
    assert ratio == Fraction(ft, q.M ** 2)
    return {"ga_terms": ga, "wa_terms": wa,
            "ratio": int(ratio) if ratio.denominator == 1 else ratio}


def measure_attention_macs(q: ComplexityQuery, heads: int = 1, seed: int = 0) -> dict:
    """Run windowed and global attention on a random t x f grid, tallying MACs.

    Terms per layer: ``first`` = one D x D projection (ftD^2), ``second`` =
    the QK^T product (M^2 ftD windowed, (ft)^2 D global). The value product
    attn.V costs the same as QK^T and is reported separately.
    """
    from . import reference

    if q.f % q.M or q.t % q.M:
        raise ValueError(f"M={q.M} must divide both f={q.f} and t={q.t} to partition windows")
    gen = Rng(seed).stream("macs")
    D = q.D
    params = {
        "a.qkv.weight": Tensor(gen.normal(size=(D, 3 * D)) * 0.02),
        "a.qkv.bias": Tensor(np.zeros(3 * D)),
        "a.proj.weight": Tensor(gen.normal(size=(D, D)) * 0.02),
        "a.proj.bias": Tensor(np.zeros(D)),
    }
    x = gen.normal(size=(1, q.t, q.f, D))
    with ad.no_grad(), ad.count_macs() as win:
        ws = partition_windows(Tensor(x), q.M, 0)
        window_attention(ws.windows, params, "a", heads, q.M)
    glob = Counter()
    reference.global_attention(x.reshape(-1, D), {k: v.data for k, v in params.items()}, "a", heads, macs=glob)

    def terms(c):
        return {"first": c["proj"], "second": c["qk"], "qkv": c["qkv"], "av": c["av"]}

    return {"windowed": terms(win), "global": terms(glob)}
