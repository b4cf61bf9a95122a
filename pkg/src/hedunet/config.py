"""Experiment configuration: one canonical JSON document per experiment."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .model import ModelConfig
from .synthdata import GenParams
from .training import TrainConfig


class ExperimentConfigError(ValueError):
    pass


def _check_keys(d: dict, allowed, where: str) -> None:
    if not isinstance(d, dict):
        raise ExperimentConfigError(f"{where} must be a JSON object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ExperimentConfigError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass
class DataSettings:
    n_train: int = 24
    n_val: int = 8
    tile_size: int = 96
    overlap: float = 0.0
    generator: GenParams = field(default_factory=GenParams)

    def validate(self) -> None:
        if self.n_train < 0 or self.n_val < 0 or self.n_train + self.n_val == 0:
            raise ExperimentConfigError("need at least one scene")
        if self.tile_size % 32 or self.tile_size > self.generator.size:
            raise ExperimentConfigError("tile_size must be a multiple of 32 and fit in a scene")
        if not 0.0 <= self.overlap < 1.0:
            raise ExperimentConfigError("overlap must be in [0, 1)")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "generator"}
        d["generator"] = self.generator.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DataSettings:
        _check_keys(d, [f.name for f in fields(cls)], "data")
        d = dict(d)
        gen = GenParams.from_dict(d.pop("generator", {}))
        return cls(generator=gen, **d)


@dataclass
class MetricSettings:
    band_radius_m: float = 2000.0
    match_radius_px: float = 2.0
    n_thresholds: int = 99

    def validate(self) -> None:
        if self.band_radius_m <= 0 or self.match_radius_px < 0 or self.n_thresholds < 1:
            raise ExperimentConfigError("invalid metric settings")

    @property
    def thresholds(self):
        import numpy as np

        n = self.n_thresholds
        return np.round(np.arange(1, n + 1) / (n + 1), 6)


@dataclass
class ExperimentConfig:
    seed: int = 42
    output_dir: str = "runs/default"
    data: DataSettings = field(default_factory=DataSettings)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricSettings = field(default_factory=MetricSettings)

    SECTIONS = ("seed", "output_dir", "data", "model", "train", "metrics")

    def validate(self) -> None:
        if not 0 <= self.seed < 2**63:
            raise ExperimentConfigError("seed must be a non-negative 63-bit integer")
        self.data.validate()
        self.model.validate()
        self.train.validate()
        self.metrics.validate()
        if self.model.use_dem and not self.data.generator.with_dem:
            raise ExperimentConfigError("model.use_dem needs data.generator.with_dem")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "data": self.data.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "metrics": asdict(self.metrics),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        _check_keys(d, cls.SECTIONS, "experiment config")
        try:
            metrics = d.get("metrics", {})
            _check_keys(metrics, [f.name for f in fields(MetricSettings)], "metrics")
            cfg = cls(
                seed=int(d.get("seed", 42)),
                output_dir=str(d.get("output_dir", "runs/default")),
                data=DataSettings.from_dict(d.get("data", {})),
                model=ModelConfig.from_dict(d.get("model", {})),
                train=TrainConfig.from_dict(d.get("train", {})),
                metrics=MetricSettings(**metrics),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ExperimentConfigError):
                raise
            raise ExperimentConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> ExperimentConfig:
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ExperimentConfigError(f"invalid JSON: {exc}") from exc
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        return cls.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())
