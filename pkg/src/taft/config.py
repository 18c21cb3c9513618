"""Run configuration: one flat JSON object plus a nested ``model`` block."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .core import DEFAULT_RIDGE
from .episodes import AREA_RANGE, DEFAULT_CANVAS, SCALE_RANGE
from .errors import ConfigError
from .metrics import DEFAULT_SCALES, EVAL_QUERIES
from .segnet import ModelConfig
from .trainer import TrainConfig


@dataclass
class RunConfig:
    # training
    episodes: int = 3000
    base_lr: float = 3e-4
    encoder_lr_mult: float = 1.0
    decay_factor: float = 0.1
    decay_at_episode: int | None = None
    weight_decay: float = 1e-4
    shots: int = 1
    queries: int | None = None
    split: int = 0
    seed: int = 0
    ridge: float = DEFAULT_RIDGE
    differentiate_through_P: bool = True
    average_over_queries: bool = True
    precision: int = 32
    checkpoint_every: int = 500
    # generator
    canvas: int = DEFAULT_CANVAS
    scale_min: float = SCALE_RANGE[0]
    scale_max: float = SCALE_RANGE[1]
    area_min: float = AREA_RANGE[0]
    area_max: float = AREA_RANGE[1]
    # evaluation
    episodes_per_class: int = 500
    eval_queries: int = EVAL_QUERIES
    scales: list[float] = field(default_factory=lambda: list(DEFAULT_SCALES))
    eval_seed: int = 0
    # paths
    checkpoint_dir: str | None = None
    log_path: str | None = None
    model: dict = field(default_factory=lambda: asdict(ModelConfig()))

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        model = dict(asdict(ModelConfig()))
        model_over = data.get("model", {})
        if not isinstance(model_over, dict):
            raise ConfigError("'model' must be a JSON object")
        bad = sorted(set(model_over) - set(model))
        if bad:
            raise ConfigError(f"unknown model keys: {', '.join(bad)}")
        model.update(model_over)
        cfg = cls(**{**data, "model": model})
        cfg.train_config()  # validates
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                episodes=self.episodes, base_lr=self.base_lr, encoder_lr_mult=self.encoder_lr_mult,
                decay_factor=self.decay_factor, decay_at_episode=self.decay_at_episode,
                weight_decay=self.weight_decay, shots=self.shots, queries=self.queries, split=self.split,
                seed=self.seed, ridge=self.ridge, differentiate_through_P=self.differentiate_through_P,
                average_over_queries=self.average_over_queries, precision=self.precision,
                checkpoint_every=self.checkpoint_every, canvas=self.canvas,
                scale_range=(self.scale_min, self.scale_max), area_range=(self.area_min, self.area_max),
                model=ModelConfig(**self.model),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def resolved(self) -> RunConfig:
        """Copy with derived defaults (decay point, query count) filled in."""
        tc = self.train_config()
        return RunConfig.from_dict({**self.to_dict(), "decay_at_episode": tc.decay_at_episode,
                                    "queries": tc.queries})
