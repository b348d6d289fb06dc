"""Experiment configuration: one JSON file, nested sections, dotted overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .channel import ImpairmentConfig, JitterSpec, SceneConfig
from .fusion import TASK_CLASSES, VARIANTS, ModelDims
from .train import TrainConfig

SWEEP_AXES = ("labeled_fraction", "latent_dim", "finetune_lr", "lambda")


@dataclass
class SimConfig:
    snapshots_per_class: int = 100
    test_snapshots_per_class: int = 50
    labeled_fraction: float = 1.0
    scene_seed: int = 1
    num_streams: int = 3
    num_subcarriers: int = 242
    num_guards: int = 8
    num_beams: int = 36
    scene: SceneConfig = field(default_factory=SceneConfig)
    impairments: ImpairmentConfig = field(default_factory=ImpairmentConfig)


@dataclass
class ModelConfig:
    latent_dim: int = 24
    tap_width: int = 64
    tap_pool_bins: int = 1
    head_hidden: int = 64
    head_layers: int = 2
    csi_taps: tuple = (1, 3, 5, 6)
    bsnr_taps: tuple = (1, 4, 5)


@dataclass
class SweepConfig:
    protocol: str = "supervised"
    variants: tuple = VARIANTS
    labeled_fraction: tuple = (1.0, 0.4, 0.2, 0.1)
    latent_dim: tuple = (12, 24, 48)
    finetune_lr: tuple = (0.0, 5e-4, 1e-3, 2e-3)
    lambda_: tuple = (0.2, 0.5, 0.8)
    seeds: tuple = (0,)


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    task: str = "pose"
    variant: str = "granularity_matching"
    seed: int = 0
    output_dir: str = ""  # empty: runs/<name>
    augment_bsnr: bool = True
    pool_datasets: tuple = ()
    sim: SimConfig = field(default_factory=SimConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig.supervised(lr_head=0.003, early_stop_patience=30))
    pretrain: TrainConfig = field(default_factory=TrainConfig.pretraining)
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig.finetuning(labeled_fraction=0.1))
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in TASK_CLASSES:
            raise ValueError(f"unknown task {self.task!r}; choose from {sorted(TASK_CLASSES)}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.sweep.protocol not in ("supervised", "transfer"):
            raise ValueError("sweep.protocol must be 'supervised' or 'transfer'")
        bad = [v for v in self.sweep.variants if v not in VARIANTS]
        if bad:
            raise ValueError(f"unknown sweep variants {bad}")

    @property
    def num_classes(self) -> int:
        return TASK_CLASSES[self.task]

    def model_dims(self) -> ModelDims:
        active = self.sim.num_subcarriers - self.sim.num_guards
        m = self.model
        return ModelDims(
            num_streams=self.sim.num_streams, csi_width=active, bsnr_width=self.sim.num_beams,
            num_classes=self.num_classes, latent_dim=m.latent_dim, tap_width=m.tap_width,
            tap_pool_bins=m.tap_pool_bins, head_hidden=m.head_hidden, head_layers=m.head_layers,
            csi_taps=tuple(m.csi_taps), bsnr_taps=tuple(m.bsnr_taps),
        )

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with the run seed pushed into every training protocol."""
        cfg = from_dict(to_dict(self))
        cfg.seed = seed
        for section in (cfg.train, cfg.pretrain, cfg.finetune):
            section.seed = seed
        return cfg


def _to_jsonable(x):
    if dataclasses.is_dataclass(x):
        return {(k.rstrip("_")): _to_jsonable(v) for k, v in ((f.name, getattr(x, f.name)) for f in dataclasses.fields(x))}
    if isinstance(x, (list, tuple)):
        return [_to_jsonable(v) for v in x]
    return x


def to_dict(cfg: ExperimentConfig) -> dict:
    return _to_jsonable(cfg)


def _build(cls, data: dict):
    if not isinstance(data, dict):
        raise ValueError(f"expected an object for {cls.__name__}, got {type(data).__name__}")
    names = {f.name.rstrip("_"): f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ValueError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for key, value in data.items():
        f = names[key]
        current = getattr(defaults, f.name)
        if dataclasses.is_dataclass(current):
            kwargs[f.name] = _build(type(current), value)
        elif isinstance(current, tuple):
            kwargs[f.name] = tuple(value)
        else:
            kwargs[f.name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    return from_dict(json.loads(p.read_text()))


def dumps(cfg: ExperimentConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    data = to_dict(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ValueError(f"unknown config section {part!r} in {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ValueError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(raw)
    return from_dict(data)


__all__ = [
    "ExperimentConfig", "SimConfig", "ModelConfig", "SweepConfig", "SWEEP_AXES",
    "load_config", "from_dict", "to_dict", "dumps", "apply_overrides",
    "ImpairmentConfig", "JitterSpec", "SceneConfig", "asdict",
]
