"""Full model: log-mel batch -> presence-map logits, plus parameter handling."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .config import ModelConfig
from .encoder import count_encoder_params, encoder_param_shapes, forward_encoder, init_value
from .head import pool_clip, ts_conv
from .tokens import grid_to_time_major, layout_grid, order_tokens, patch_embed

Params = dict[str, Tensor]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = encoder_param_shapes(cfg)
    shapes["head.weight"] = (cfg.C, cfg.final_dim, 3, cfg.map_freq)
    shapes["head.bias"] = (cfg.C,)
    return shapes


def count_head_params(cfg: ModelConfig) -> int:
    return cfg.C * cfg.final_dim * 3 * cfg.map_freq + cfg.C


def count_params(cfg: ModelConfig) -> int:
    return count_encoder_params(cfg) + count_head_params(cfg)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Params:
    """Deterministic init; each parameter draws from its own named stream."""
    rng = Rng(seed)
    return {name: Tensor(init_value(name, shape, rng.stream("init", name), dtype), requires_grad=True, name=name)
            for name, shape in param_shapes(cfg).items()}


def as_params(params: dict) -> Params:
    """Wrap plain arrays (e.g. loaded from a checkpoint) as parameter tensors."""
    return {k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=True, name=k) for k, v in params.items()}


def cast_params(params: Params, dtype) -> Params:
    return {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in params.items()}


def forward(params: Params, cfg: ModelConfig, spec, trace: dict | None = None) -> Tensor:
    """(B, T, F) log-mel -> presence-map logits (B, T/8P, C).

    ``trace``, when given, collects the intermediate shapes.
    """
    spec = ad.as_tensor(spec, params["head.bias"])
    if spec.ndim == 2:
        spec = ad.reshape(spec, (1,) + spec.shape)
    if spec.shape[1:] != (cfg.T, cfg.F):
        raise ad.ShapeError("forward", spec.shape[1:], (cfg.T, cfg.F))
    tokens = patch_embed(spec, params["patch_embed.weight"], params["patch_embed.bias"], cfg.P)
    tokens = ad.layer_norm(tokens, params["patch_norm.weight"], params["patch_norm.bias"])
    if cfg.abs_pos_embed:
        tokens = tokens + params["pos_embed"]
    seq = order_tokens(tokens, cfg)
    grid = layout_grid(seq, cfg)
    final = forward_encoder(grid, cfg, params)
    time_major = grid_to_time_major(final, cfg.n_windows)
    logits = ts_conv(time_major, params["head.weight"], params["head.bias"], cfg.map_steps)
    if trace is not None:
        trace.update(spectrogram=spec.shape[1:], tokens=seq.shape[1], grid=grid.shape[1:],
                     final=final.shape[1:], time_major=time_major.shape[1:], presence=logits.shape[1:])
    return logits


def predict(params: Params, cfg: ModelConfig, spec) -> tuple[np.ndarray, np.ndarray]:
    """Inference: (presence probabilities (B, T', C), clip probabilities (B, C))."""
    with ad.no_grad():
        logits = forward(as_params(params), cfg, spec)
        probs = ad.sigmoid(logits)
    return probs.data, pool_clip(logits).data
