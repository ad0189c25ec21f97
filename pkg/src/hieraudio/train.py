"""AdamW, the epoch learning-rate schedule, weight averaging and the training loop."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import AugmentFlags, MaskSpec, balanced_sampler, build_batch, uniform_sampler
from .autodiff import Rng, Tensor
from .checkpoint import save_checkpoint
from .config import Config
from .head import bce_loss, pool_clip
from .metrics import compute_accuracy, compute_map, write_metrics_csv
from .model import forward, init_params, predict

log = logging.getLogger(__name__)

WARMUP_FACTORS = (0.05, 0.1, 0.2)
HALVING_PERIOD = 10
FLOOR_FACTOR = 0.05


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05

    @classmethod
    def create(cls, params: dict, **hyper) -> "OptimState":
        zeros = {k: np.zeros_like(_array(v)) for k, v in params.items()}
        return cls({k: z.copy() for k, z in zeros.items()}, zeros, **hyper)


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else x


def adamw_step(params: dict, grads: dict, state: OptimState, lr: float) -> None:
    """In-place AdamW: decay ``p *= 1 - lr*wd`` first, then the bias-corrected Adam update."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise FloatingPointError(f"non-finite gradients in {len(bad)} parameter(s), first: {bad[:3]}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        p = _array(p)
        g = grads[name]
        if g.shape != p.shape:
            raise ad.ShapeError("adamw_step", p.shape, g.shape)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def lr_factor(epoch: int) -> float:
    """0.05, 0.1, 0.2 for epochs 1-3, then 0.2 halved every 10 epochs, floored at 0.05.

    The frozen table: epochs 4-12 -> 0.2, 13-22 -> 0.1, 23 on -> 0.05.
    """
    if epoch < 1:
        raise ValueError(f"epochs count from 1, got {epoch}")
    if epoch <= len(WARMUP_FACTORS):
        return WARMUP_FACTORS[epoch - 1]
    peak = WARMUP_FACTORS[-1]
    return max(FLOOR_FACTOR, peak * 2.0 ** -((epoch - len(WARMUP_FACTORS)) // HALVING_PERIOD))


def weight_average(checkpoints: list[dict]) -> dict[str, np.ndarray]:
    """Elementwise mean of several parameter sets with identical names and shapes."""
    if not checkpoints:
        raise ValueError("weight averaging needs at least one checkpoint")
    first = checkpoints[0]
    for ck in checkpoints[1:]:
        if ck.keys() != first.keys() or any(_array(ck[k]).shape != _array(first[k]).shape for k in first):
            raise ValueError("checkpoints differ in parameter names or shapes")
    out = {}
    for k in first:
        acc = np.zeros(_array(first[k]).shape, dtype=np.float64)
        for ck in checkpoints:
            acc += _array(ck[k])
        out[k] = (acc / len(checkpoints)).astype(_array(first[k]).dtype)
    return out


def clip_loss(params: dict, cfg, specs, targets) -> Tensor:
    return bce_loss(pool_clip(forward(params, cfg, specs)), targets)


def train_step(params: dict, cfg, specs, targets, state: OptimState, lr: float) -> float:
    """One forward/backward/AdamW update on a batch; returns the batch loss before the update."""
    loss = clip_loss(params, cfg, specs, targets)
    names = list(params)
    for p in params.values():
        p.grad = None
    grads = ad.backward(loss, [params[k] for k in names])
    adamw_step(params, dict(zip(names, grads)), state, lr)
    return loss.item()


def evaluate_clips(params: dict, cfg, dataset, batch_size: int = 16) -> dict:
    """Clean (unaugmented) clip predictions over a dataset, with BCE, mAP and accuracy."""
    probs, maps = [], []
    for start in range(0, len(dataset), batch_size):
        idx = list(range(start, min(start + batch_size, len(dataset))))
        specs, _ = build_batch(idx, dataset)
        presence, clip = predict(params, cfg, specs)
        probs.append(clip)
        maps.append(presence)
    probs = np.concatenate(probs)
    targets = dataset.targets()
    out = {"probs": probs, "presence": np.concatenate(maps),
           "bce": bce_loss(Tensor(probs.astype(np.float64)), targets).item(),
           "accuracy": compute_accuracy(probs, targets)}
    out["mAP"] = compute_map(probs, targets)[1] if targets.any() else float("nan")
    return out


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    metrics: list[tuple] = field(default_factory=list)
    steps: int = 0


def train(cfg: Config, dataset, out_dir=None, val_dataset=None) -> TrainResult:
    """Seeded training run; writes per-epoch and averaged checkpoints plus metrics when ``out_dir`` is set."""
    mc, tc = cfg.model, cfg.train
    rng = Rng(tc.seed)
    params = init_params(mc, tc.seed)
    state = OptimState.create(params, beta1=tc.beta1, beta2=tc.beta2, eps=tc.adam_eps,
                              weight_decay=tc.weight_decay)
    if tc.sampler == "balanced":
        sampler = balanced_sampler(dataset.labels, mc.C, rng.stream("sampler"))
    elif tc.sampler == "uniform":
        sampler = uniform_sampler(len(dataset), rng.stream("sampler"))
    else:
        raise ValueError(f"unknown sampler {tc.sampler!r} (expected 'balanced' or 'uniform')")
    flags = AugmentFlags(train=True, mixup=tc.mixup, mixup_alpha=tc.mixup_alpha, spec_mask=tc.spec_mask,
                         masks=MaskSpec(tc.time_mask, tc.freq_mask))
    aug = rng.stream("augment")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    recent: deque = deque(maxlen=max(1, tc.average_last))
    metrics: list[tuple] = []
    steps = 0
    for epoch in range(1, tc.epochs + 1):
        lr = tc.base_lr * lr_factor(epoch)
        losses = []
        for _ in range(tc.steps_per_epoch):
            idx = [next(sampler) for _ in range(tc.batch_size)]
            specs, targets = build_batch(idx, dataset, flags, aug)
            losses.append(train_step(params, mc, specs, targets, state, lr))
            steps += 1
        snapshot = {k: v.data.copy() for k, v in params.items()}
        recent.append(snapshot)
        metrics += [(epoch, "train", "loss", float(np.mean(losses))), (epoch, "train", "lr", lr)]
        for split, ds in (("train", dataset), ("val", val_dataset)):
            if ds is None:
                continue
            ev = evaluate_clips(params, mc, ds)
            metrics += [(epoch, split, k, ev[k]) for k in ("bce", "mAP", "accuracy")]
        log.info("epoch %d: loss %.4f lr %.2e", epoch, np.mean(losses), lr)
        if out is not None:
            save_checkpoint(out / f"epoch_{epoch:03d}.htsc", cfg, snapshot)
    final = weight_average(list(recent))
    if out is not None:
        save_checkpoint(out / "final.htsc", cfg, final)
        write_metrics_csv(out / "metrics.csv", metrics)
    return TrainResult(final, metrics, steps)
