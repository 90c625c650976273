"""Experiment configuration: YAML-backed dataclasses with strict loading."""

from __future__ import annotations

import hashlib
import json
import types
import typing
from dataclasses import dataclass, field, fields, asdict, is_dataclass
from pathlib import Path

import yaml

from .datapipe import DegradationSpec
from .imagecore import FOLD_SETS
from .losses import LossWeights
from .networks import BACKBONES, RestorerConfig


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class DataConfig:
    root: str = "data/train"
    val_root: str | None = None
    batch_size: int = 6
    patch_size: int = 112
    steps_per_epoch: int | None = None


@dataclass
class NetworkConfig:
    channels: int = 3
    generator_blocks: int = 6
    generator_channels: int = 32
    generator_prompt_skip: bool = True
    discriminator_channels: int = 64
    discriminator_layers: int = 3
    restorer: RestorerConfig = field(default_factory=RestorerConfig)
    stage0_kernel: int = 5
    stage0_learnable: bool = True


@dataclass
class LossConfig:
    bgm: float = 6.0
    ssim: float = 1.0
    sigma: dict = field(default_factory=lambda: {3: 0.01, 9: 0.1, 15: 1.0})
    ssim_window: int = 11
    dedup_real: bool = False
    branch1_pairs: bool = False

    def weights(self) -> LossWeights:
        return LossWeights(bgm=self.bgm, ssim=self.ssim, sigma=tuple(sorted(self.sigma.items())),
                           ssim_window=self.ssim_window)


@dataclass
class ScheduleConfig:
    s1: int = 4
    s2: int = 12
    s3: int = 14
    sc_iterations: int = 8
    rebsc_folds: list = field(default_factory=lambda: [2, 4])
    early_stop_db: float | None = None
    fold_prompts: bool = False


@dataclass
class OptimizerConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass
class AblationFlags:
    self_synthesis_branch: bool = False
    bgm_loss: bool = True
    pl_module: bool = True
    parallel_branches: bool = True


# Checkmark grid of the ablation table; V5 is the full two-branch baseline.
VARIANTS = {
    "V1": AblationFlags(self_synthesis_branch=False, bgm_loss=False, pl_module=False, parallel_branches=False),
    "V2": AblationFlags(self_synthesis_branch=False, bgm_loss=True, pl_module=False, parallel_branches=False),
    "V3": AblationFlags(self_synthesis_branch=False, bgm_loss=True, pl_module=True, parallel_branches=False),
    "V4": AblationFlags(self_synthesis_branch=True, bgm_loss=True, pl_module=True, parallel_branches=False),
    "V5": AblationFlags(self_synthesis_branch=False, bgm_loss=True, pl_module=True, parallel_branches=True),
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    corpus: DegradationSpec = field(default_factory=DegradationSpec)
    networks: NetworkConfig = field(default_factory=NetworkConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    stop_grad_prompt: bool = True
    rollback_nonfinite: bool = True
    variants: list = field(default_factory=lambda: list(VARIANTS))

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return _plain(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        cfg = _build(cls, data or {}, "")
        validate(cfg)
        return cfg

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path) -> None:
        Path(path).write_text(self.to_yaml())

    def hash(self) -> str:
        """Stable hash of everything except the output location."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **overrides) -> "ExperimentConfig":
        d = self.to_dict()
        for dotted, value in overrides.items():
            node = d
            *head, last = dotted.split(".")
            for k in head:
                node = node[k]
            node[last] = _plain(value)
        return ExperimentConfig.from_dict(d)


def load_config(path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"not valid YAML: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(str(path), "top level must be a mapping")
    return ExperimentConfig.from_dict(data)


def _plain(obj):
    if is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(path or "<root>", f"expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{path}{unknown[0]}", "unknown key")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        sub = f"{path}{name}"
        if is_dataclass(tp):
            kwargs[name] = _build(tp, value, sub + ".")
        else:
            kwargs[name] = _coerce(tp, value, sub)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path.rstrip(".") or "<root>", str(exc)) from exc


def _coerce(tp, value, path):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if value is None:
        if type(None) in args:
            return None
        raise ConfigError(path, "must not be null")
    if origin in (typing.Union, types.UnionType):
        tp = next(a for a in args if a is not type(None))
        return _coerce(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if tp in (list, tuple) or origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return list(value)
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected a mapping, got {value!r}")
        return dict(value)
    return value


def validate(cfg: ExperimentConfig) -> None:
    s = cfg.schedule
    if not 0 < s.s1 < s.s2 < s.s3:
        raise ConfigError("schedule", f"requires 0 < s1 < s2 < s3, got s1={s.s1} s2={s.s2} s3={s.s3}")
    if s.sc_iterations < 1:
        raise ConfigError("schedule.sc_iterations", "must be at least 1")
    if s.s2 - s.s1 < s.sc_iterations:
        raise ConfigError("schedule", "s2 - s1 must provide at least one epoch per SC iteration")
    if not s.rebsc_folds:
        raise ConfigError("schedule.rebsc_folds", "must be nonempty")
    for k in s.rebsc_folds:
        if k not in FOLD_SETS:
            raise ConfigError("schedule.rebsc_folds", f"fold count {k} not in {sorted(FOLD_SETS)}")
    if s.s3 - s.s2 < len(s.rebsc_folds):
        raise ConfigError("schedule", "s3 - s2 must provide at least one epoch per Reb-SC round")
    o = cfg.optimizer
    if o.lr <= 0:
        raise ConfigError("optimizer.lr", "must be positive")
    for name in ("beta1", "beta2"):
        if not 0 < getattr(o, name) < 1:
            raise ConfigError(f"optimizer.{name}", "must lie in (0, 1)")
    d = cfg.data
    if d.batch_size < 1 or d.patch_size < 1:
        raise ConfigError("data", "batch_size and patch_size must be positive")
    if d.steps_per_epoch is not None and d.steps_per_epoch < 1:
        raise ConfigError("data.steps_per_epoch", "must be positive")
    n = cfg.networks
    if n.restorer.backbone not in BACKBONES:
        raise ConfigError("networks.restorer.backbone", f"unknown backbone {n.restorer.backbone!r}")
    if n.channels not in (1, 3):
        raise ConfigError("networks.channels", "must be 1 or 3")
    if n.stage0_kernel % 2 == 0:
        raise ConfigError("networks.stage0_kernel", "must be odd")
    for v in cfg.variants:
        if v not in VARIANTS:
            raise ConfigError("variants", f"unknown variant {v!r}")
    try:
        cfg.losses.weights()
    except ValueError as exc:
        raise ConfigError("losses", str(exc)) from exc
