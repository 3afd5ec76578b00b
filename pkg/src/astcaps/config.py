"""Run configuration: one JSON document covering data, model, training and seeds."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .decision import MarginParams
from .model import ModelConfig

MODALITIES = ("synthetic", "timeseries", "skeleton", "image")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    manifest: str | None = None
    data_root: str | None = None
    stride: int | None = None
    skip_timestamp: bool = False
    # synthetic generator
    n_classes: int = 4
    windows_per_class: int = 200
    noise_sigma: float = 0.05
    seed: int = 7


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 32
    epochs: int = 50
    train_fraction: float = 0.8
    bayes_alpha: float = 1.0


@dataclass
class SeedConfig:
    init: int = 7
    shuffle: int = 8
    split: int = 7


@dataclass
class RaceConfig:
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    epochs: int = 60
    hidden: int = 16
    lr: float = 0.001
    batch_size: int = 32
    threshold: float = 0.1


@dataclass
class RunConfig:
    dataset: DatasetConfig
    model: dict
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    race: RaceConfig = field(default_factory=RaceConfig)
    out: str = "runs/default"
    base_dir: str = "."

    def model_config(self, n_classes: int | None = None) -> ModelConfig:
        cfg = dict(self.model)
        if n_classes is not None:
            cfg["n_classes"] = n_classes
        elif "n_classes" not in cfg:
            cfg["n_classes"] = self.dataset.n_classes
        try:
            return ModelConfig(**cfg)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model: {exc}") from None

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d


def _section(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{name}: unknown keys {', '.join(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def parse_config(raw: dict, base_dir: str | Path = ".") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - {"dataset", "model", "train", "seeds", "race", "out"})
    if unknown:
        raise ConfigError(f"unknown top-level keys {', '.join(unknown)}")
    if "model" not in raw or not isinstance(raw["model"], dict):
        raise ConfigError("config needs a 'model' object with at least K and T")
    cfg = RunConfig(
        dataset=_section(DatasetConfig, raw.get("dataset"), "dataset"),
        model=dict(raw["model"]),
        train=_section(TrainConfig, raw.get("train"), "train"),
        seeds=_section(SeedConfig, raw.get("seeds"), "seeds"),
        race=_section(RaceConfig, raw.get("race"), "race"),
        out=str(raw.get("out", "runs/default")),
        base_dir=str(base_dir),
    )
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    d, t = cfg.dataset, cfg.train
    if d.kind not in MODALITIES:
        raise ConfigError(f"dataset.kind must be one of {', '.join(MODALITIES)}")
    if d.kind != "synthetic" and not d.manifest:
        raise ConfigError(f"dataset.kind={d.kind} needs a manifest")
    if d.kind == "synthetic" and (d.n_classes < 2 or d.windows_per_class < 2 or d.noise_sigma < 0):
        raise ConfigError("synthetic dataset needs n_classes >= 2, windows_per_class >= 2, noise_sigma >= 0")
    if d.stride is not None and d.stride < 1:
        raise ConfigError("dataset.stride must be positive")
    if not 0.0 < t.train_fraction < 1.0:
        raise ConfigError("train.train_fraction must be in (0, 1)")
    if t.lr <= 0 or t.batch_size < 1 or t.epochs < 0 or t.bayes_alpha <= 0:
        raise ConfigError("train: lr > 0, batch_size >= 1, epochs >= 0 and bayes_alpha > 0 required")
    for name in ("init", "shuffle", "split"):
        if not 0 <= getattr(cfg.seeds, name) < 2**64:
            raise ConfigError(f"seeds.{name} must be an unsigned 64-bit integer")
    if not cfg.race.seeds or cfg.race.epochs < 1 or cfg.race.hidden < 1:
        raise ConfigError("race: need seeds, epochs >= 1, hidden >= 1")
    if not isinstance(cfg.model.get("margin", {}), (dict, MarginParams)):
        raise ConfigError("model.margin must be an object")
    # n_classes may come from the manifest; check the rest now
    probe = dict(cfg.model)
    probe.setdefault("n_classes", max(d.n_classes, 2))
    try:
        ModelConfig(**probe)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from None


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return parse_config(raw, path.parent)
