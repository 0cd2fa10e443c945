"""Run configuration: YAML file with sections data, model, losses, optim, run.

Two presets exist. ``default`` carries the full-size constants (224x224
frames, 8 segments, a 4-stage residual net). ``tiny`` keeps the same
sampling rule and loss weights on 32x32 frames with a narrow net so CPU
training takes minutes.
"""

from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .labelkit import LabelRuleConfig

RUN_DIR_ENV = "DMSD_RUN_DIR"


@dataclass
class DataConfig:
    root: str = "data/single"
    task: str = "single"
    gen_seed: int = 0
    image_size: int = 64
    native_fps: float = 30.0
    observe_seconds: float = 3.0
    counts: dict = field(default_factory=lambda: {"train": 50, "val": 10, "test": 20})
    frame_size: int = 224
    segments: int = 8
    frame_stride: int = 8
    horizon_t: float = 3.0
    r_fraction: float = 0.1
    boundary_policy: str = "ccw-next"
    axis_convention: str = "paper-verbatim"
    # random flips and transposes of training clips with labels remapped to match
    augment: bool = False
    # restrict training and validation clips to these individual ids
    individuals: list | None = None
    # per-channel mean/std of raw frames and of frame differences; filled from
    # the training split on first use and frozen into config.resolved
    norm: dict | None = None

    @property
    def label_rule(self) -> LabelRuleConfig:
        return LabelRuleConfig(self.horizon_t, self.r_fraction, self.boundary_policy, self.axis_convention)


@dataclass
class ModelConfig:
    arch: str = "dmsd"
    widths: list = field(default_factory=lambda: [32, 64, 128, 256])
    blocks_per_stage: int = 1
    feature_dim: int = 256
    stem_stride: int = 4
    shift_fraction: float = 0.125
    expand_factor: int = 4
    reweight: bool = True
    activation: str = "silu"
    head_hidden: int | None = None
    num_centers: int = 4
    center_init_scale: float = 0.1


@dataclass
class LossConfig:
    lambda_s: float = 0.1
    lambda_m: float = 1.0
    temperature: float = 1.0
    use_sc: bool = True
    use_mc: bool = True
    include_positive: bool = False


@dataclass
class OptimConfig:
    epochs: int = 30
    batch_size: int = 16
    lr_backbone: float = 0.01
    # theta learning rate in the L_f sub-step; None shares lr_backbone
    lr_backbone_f: float | None = None
    lr_head: float = 0.01
    lr_centers: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 10.0
    finetune_lr_scale: float = 0.1
    finetune_steps: int = 100


@dataclass
class RunConfig:
    seed: int = 0
    run_dir: str = "runs/default"
    finetune_from: str | None = None


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def copy(self) -> "Config":
        return copy.deepcopy(self)

    def validate(self) -> "Config":
        if self.losses.use_sc and self.optim.batch_size < 4:
            raise ValueError("batch_size must be >= 4 when the scenario contrast loss is on")
        for name in ("lr_backbone", "lr_head", "lr_centers"):
            if getattr(self.optim, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.losses.lambda_s < 0 or self.losses.lambda_m < 0:
            raise ValueError("loss weights must be non-negative")
        if self.model.arch not in ("dmsd", "single"):
            raise ValueError(f"unknown arch {self.model.arch!r}")
        self.data.label_rule  # noqa: B018 - validates the label section
        return self


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "losses": LossConfig,
    "optim": OptimConfig,
    "run": RunConfig,
}

ABLATIONS = {
    "S1": (False, False),
    "S2": (True, False),
    "S3": (False, True),
    "full": (True, True),
}


def from_dict(d: dict) -> Config:
    cfg = Config()
    for section, values in (d or {}).items():
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section {section!r}")
        target = getattr(cfg, section)
        names = {f.name for f in dataclasses.fields(target)}
        for key, value in (values or {}).items():
            if key not in names:
                raise ValueError(f"unknown key {section}.{key}")
            setattr(target, key, value)
    return cfg


def preset(name: str) -> Config:
    cfg = Config()
    if name == "default":
        return cfg
    if name == "tiny":
        cfg.data.frame_size = 32
        cfg.model.widths = [16, 32, 32, 64]
        cfg.model.feature_dim = 64
        cfg.model.stem_stride = 2
        return cfg
    raise ValueError(f"unknown preset {name!r}")


def apply_overrides(cfg: Config, overrides: list[str]) -> Config:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    d = cfg.to_dict()
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep or "." not in key:
            raise ValueError(f"override must look like section.key=value, got {item!r}")
        section, name = key.split(".", 1)
        d.setdefault(section, {})[name] = yaml.safe_load(raw)
    return from_dict(d)


def apply_ablation(cfg: Config, ablation: str) -> Config:
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}; expected one of {sorted(ABLATIONS)}")
    cfg.losses.use_sc, cfg.losses.use_mc = ABLATIONS[ablation]
    return cfg


def load(path_or_preset: str, overrides: list[str] | None = None) -> Config:
    """Load a YAML config file, or a preset named ``default`` / ``tiny``.

    A file may name a base preset under a top-level ``preset`` key.
    """
    path = Path(path_or_preset)
    if path.suffix in (".yaml", ".yml", ".resolved") or path.exists():
        if not path.exists():
            raise FileNotFoundError(path)
        raw = yaml.safe_load(path.read_text()) or {}
        base = preset(raw.pop("preset", "default")).to_dict()
        for section, values in raw.items():
            if not isinstance(values, dict):
                raise ValueError(f"config section {section!r} must be a mapping")
            base.setdefault(section, {}).update(values)
        cfg = from_dict(base)
    else:
        cfg = preset(path_or_preset)
    cfg = apply_overrides(cfg, overrides or [])
    env_run_dir = os.environ.get(RUN_DIR_ENV)
    if env_run_dir:
        cfg.run.run_dir = env_run_dir
    return cfg.validate()


def dump(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def read_resolved(path: str | Path) -> dict[str, Any]:
    return yaml.safe_load(Path(path).read_text())
