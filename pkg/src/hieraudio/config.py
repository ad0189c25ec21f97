"""Model/training configuration and the ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .dsp import FeatureConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    T: int = 1024
    F: int = 64
    P: int = 4
    patch_window_frames: int = 256
    D: int = 96
    M: int = 8
    C: int = 527
    depths: tuple[int, ...] = (2, 2, 6, 2)
    heads: tuple[int, ...] = (4, 8, 16, 32)
    mlp_ratio: float = 4.0
    rel_pos_bias: bool = True
    abs_pos_embed: bool = False
    sample_rate: int = 32000
    window_size: int = 1024
    hop_size: int = 320
    fmin: float = 50.0
    fmax: float = 14000.0
    clip_seconds: float = 10.0

    def __post_init__(self):
        self.depths = tuple(self.depths)
        self.heads = tuple(self.heads)

    @property
    def grid_rows(self) -> int:
        return self.patch_window_frames // self.P

    @property
    def n_windows(self) -> int:
        return self.T // self.patch_window_frames

    @property
    def freq_patches(self) -> int:
        return self.F // self.P

    @property
    def grid_cols(self) -> int:
        return self.freq_patches * self.n_windows

    @property
    def n_stages(self) -> int:
        return len(self.depths)

    @property
    def downsample(self) -> int:
        """Total patch-grid reduction after all merges (8 for four groups)."""
        return 2 ** (self.n_stages - 1)

    @property
    def final_dim(self) -> int:
        return self.D * self.downsample

    @property
    def map_steps(self) -> int:
        """Presence-map time extent T / (8P)."""
        return self.T // (self.P * self.downsample)

    @property
    def map_freq(self) -> int:
        return self.F // (self.P * self.downsample)

    def stage_dim(self, g: int) -> int:
        return self.D * 2 ** g

    def features(self) -> FeatureConfig:
        return FeatureConfig(self.sample_rate, self.window_size, self.hop_size, self.F, self.T,
                             self.fmin, self.fmax)

    def validate(self) -> "ModelConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(min(self.T, self.F, self.P, self.D, self.M, self.C) > 0, "sizes must be positive")
        need(self.F % self.P == 0, f"P={self.P} must divide F={self.F}")
        need(self.patch_window_frames % self.P == 0, "P must divide patch_window_frames")
        need(self.T % self.patch_window_frames == 0, "patch_window_frames must divide T")
        need(len(self.depths) == len(self.heads) and len(self.depths) >= 1, "depths/heads length mismatch")
        need(self.grid_rows % self.downsample == 0 and self.freq_patches % self.downsample == 0,
             "patch grid too small for the number of merges")
        for g, h in enumerate(self.heads):
            need(self.stage_dim(g) % h == 0, f"stage {g} dim {self.stage_dim(g)} not divisible by {h} heads")
        need(self.M % 2 == 0 or self.M == 1, "M must be even")
        return self


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 10
    steps_per_epoch: int = 50
    batch_size: int = 8
    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.05
    sampler: str = "balanced"
    mixup: bool = True
    mixup_alpha: float = 0.5
    spec_mask: bool = True
    time_mask: int = 128
    freq_mask: int = 16
    average_last: int = 5
    threshold: float = 0.5
    min_duration: float = 0.1
    collar: float = 0.2


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def tiny_model() -> ModelConfig:
    return ModelConfig(T=256, F=64, P=4, patch_window_frames=64, D=24, M=4, C=8,
                       depths=(1, 1, 2, 1), heads=(1, 2, 4, 8), clip_seconds=2.5)


# ----------------------------------------------------------------- file format


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(raw: str, current):
    if isinstance(current, bool):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if isinstance(current, tuple):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


PRESETS = {"default": ModelConfig, "tiny": tiny_model}


def parse_config(text: str, base: Config | None = None) -> Config:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    An optional ``preset = tiny|default`` line, before any other key, selects
    the starting model config.
    """
    cfg = base or Config()
    model = dataclasses.asdict(cfg.model)
    train = dataclasses.asdict(cfg.train)
    seen_key = False
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            if seen_key or raw not in PRESETS:
                raise ConfigError(f"line {lineno}: preset must be the first key and one of {sorted(PRESETS)}")
            model = dataclasses.asdict(PRESETS[raw]())
            continue
        seen_key = True
        target = model if key in model else train if key in train else None
        if target is None:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            target[key] = _parse(raw, target[key])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return Config(ModelConfig(**model).validate(), TrainConfig(**train))


def dump_config(cfg: Config) -> str:
    lines = ["# model"]
    lines += [f"{f.name} = {_format(getattr(cfg.model, f.name))}" for f in fields(cfg.model)]
    lines.append("# training")
    lines += [f"{f.name} = {_format(getattr(cfg.train, f.name))}" for f in fields(cfg.train)]
    return "\n".join(lines) + "\n"


def load_config(path) -> Config:
    path = Path(path)
    try:
        return parse_config(path.read_text(encoding="utf-8"))
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
