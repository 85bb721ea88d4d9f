"""Run configuration: nested dataclasses loaded from YAML/JSON with strict keys."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError

HEAD_NAMES = ("ed1", "ed2", "lf1", "lf2")

ABLATION_GRID = {
    "base": (),
    "ed": ("ed1", "ed2"),
    "lf": ("lf1", "lf2"),
    "ed_lf": ("ed1", "ed2", "lf1", "lf2"),
}


@dataclass
class ModelConfig:
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    bottleneck_channels: int = 160
    num_classes: int = 2
    in_channels: int = 3
    mlp_ratio: int = 10
    input_skip: bool = True
    heads: tuple[str, ...] = HEAD_NAMES
    dle_lengths: tuple[int, int, int] = (3, 7, 11)
    num_experts: int = 4
    gate_temperature: float = 30.0

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.dle_lengths = tuple(self.dle_lengths)
        self.heads = parse_heads(self.heads)
        if len(self.stage_channels) != 4 or min(self.stage_channels) < 1 or self.bottleneck_channels < 1:
            raise ConfigError(f"need four positive stage widths, got {self.stage_channels}")
        if self.num_classes != 2:
            raise ConfigError("only binary (background / line) segmentation is supported")
        if len(self.dle_lengths) != 3 or any(n < 1 or n % 2 == 0 for n in self.dle_lengths):
            raise ConfigError(f"dle_lengths must be three odd positive ints, got {self.dle_lengths}")
        if self.num_experts < 1:
            raise ConfigError("num_experts must be >= 1")


@dataclass
class LossWeights:
    """alpha/beta weight CE/Dice inside every loss; theta..mu weight the five losses."""

    alpha: float = 1.0
    beta: float = 0.4
    theta: float = 1.0
    iota: float = 1.0
    kappa: float = 1.0
    lam: float = 1.0
    mu: float = 1.0

    def __post_init__(self):
        vals = dataclasses.astuple(self)
        if not all(math.isfinite(v) for v in vals):
            raise ConfigError("loss weights must be finite")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be nonnegative")

    def head_weights(self):
        return (self.theta, self.iota, self.kappa, self.lam, self.mu)


@dataclass
class TrainConfig:
    lr0: float = 5e-4
    weight_decay: float = 0.05
    lr_min: float = 5e-6
    epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    augment: bool = False
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = _build(LossWeights, self.loss, "train.loss")
        if not 0 <= self.lr_min < self.lr0:
            raise ConfigError(f"need 0 <= lr_min < lr0, got {self.lr_min}, {self.lr0}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


@dataclass
class SynthSection:
    canvas: tuple[int, int] = (128, 128)
    lines_per_image: tuple[int, int] = (1, 3)
    width_px: tuple[float, float] = (1.0, 3.0)
    background: str = "clutter"
    noise_sigma: float = 0.03
    train_count: int = 200
    val_count: int = 50
    seed: int = 0  # data seed, independent of the training seed

    def synth_config(self):
        from .data import SynthConfig

        try:
            return SynthConfig(self.canvas, self.lines_per_image, self.width_px,
                               self.background, self.noise_sigma, self.seed)
        except ValueError as e:
            raise ConfigError(f"data.synth: {e}") from e


@dataclass
class DataConfig:
    train_root: str | None = None
    val_root: str | None = None
    layout: str = "ttpla_like"
    image_size: int = 512
    synth: SynthSection | None = None

    def __post_init__(self):
        if isinstance(self.synth, dict):
            self.synth = _build(SynthSection, self.synth, "data.synth")
        if self.layout not in ("ttpla_like", "vitl_like"):
            raise ConfigError(f"unknown layout {self.layout!r}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "runs/default"

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = _build(ModelConfig, self.model, "model")
        if isinstance(self.train, dict):
            self.train = _build(TrainConfig, self.train, "train")
        if isinstance(self.data, dict):
            self.data = _build(DataConfig, self.data, "data")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "config")


def parse_heads(value) -> tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, str):
        value = () if value.strip().lower() in ("", "none") else [s.strip() for s in value.split(",")]
    heads = tuple(value)
    bad = [h for h in heads if h not in HEAD_NAMES]
    if bad:
        raise ConfigError(f"unknown head(s) {bad}; expected a subset of {HEAD_NAMES} or 'none'")
    return tuple(h for h in HEAD_NAMES if h in heads)


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(d).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    try:
        return cls(**d)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from e


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return RunConfig.from_dict(raw)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
