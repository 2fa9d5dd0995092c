"""Run configuration: one JSON document with sections codec, tower, stage,
sample, eval and data. Every field has a default and unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .codec import CodecConfig
from .errors import ConfigError
from .model import TowerConfig

SEED_ENV = "SYNCFLOW_SEED"


@dataclass
class StageConfig:
    steps_video: int = 3000
    steps_audio: int = 2000
    steps_joint: int = 500
    batch_size: int = 8
    lr: float = 1e-3
    warmup: int = 100
    text_dropout: float = 0.1
    loss_weight_video: float = 1.0
    loss_weight_audio: float = 1.0
    val_every: int = 250
    ot_coupling: bool = True
    seed: int = 0

    def validate(self) -> "StageConfig":
        if min(self.steps_video, self.steps_audio, self.steps_joint) < 0:
            raise ConfigError("stage steps must be >= 0")
        if self.batch_size < 1 or self.lr <= 0 or self.warmup < 0 or self.val_every < 1:
            raise ConfigError("stage batch_size, lr, warmup and val_every must be positive")
        if not 0.0 <= self.text_dropout <= 1.0:
            raise ConfigError("stage.text_dropout must lie in [0, 1]")
        if self.loss_weight_video < 0 or self.loss_weight_audio < 0:
            raise ConfigError("loss weights must be >= 0")
        return self


@dataclass
class SampleConfig:
    guidance: float = 6.0
    steps: int = 50
    seed: int = 0
    mode: str = "t2av"

    def validate(self) -> "SampleConfig":
        if self.guidance < 0 or self.steps < 1:
            raise ConfigError("sample.guidance must be >= 0 and sample.steps >= 1")
        if self.mode not in ("t2av", "v2a", "audio-only"):
            raise ConfigError(f"unknown sample.mode {self.mode!r}")
        return self


@dataclass
class EvalConfig:
    seed: int = 0
    sweep: list[float] = field(default_factory=lambda: [1.0, 2.0, 4.0, 6.0, 8.0])
    num_captions: int = 60

    def validate(self) -> "EvalConfig":
        if any(w < 0 for w in self.sweep) or self.num_captions < 1:
            raise ConfigError("eval.sweep weights must be >= 0 and eval.num_captions >= 1")
        return self


@dataclass
class DataConfig:
    n_train: int = 512
    n_val: int = 64
    n_test: int = 64
    master_seed: int = 0

    def validate(self) -> "DataConfig":
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("data split sizes must be >= 1")
        return self


@dataclass
class RunConfig:
    codec: CodecConfig = field(default_factory=CodecConfig)
    tower: TowerConfig = field(default_factory=TowerConfig)
    stage: StageConfig = field(default_factory=StageConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "RunConfig":
        for f in dataclasses.fields(self):
            try:
                getattr(self, f.name).validate()
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"{f.name}: {exc}") from exc
        if self.tower.latent_channels != self.codec.video_latent_channels:
            raise ConfigError(
                f"tower.latent_channels={self.tower.latent_channels} but the codec emits "
                f"{self.codec.video_latent_channels} channels"
            )
        if self.tower.audio_dim != self.codec.d_a:
            raise ConfigError(f"tower.audio_dim={self.tower.audio_dim} but codec.d_a={self.codec.d_a}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "").validate()

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls().validate()
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(text)

    def with_seed(self, seed: int) -> "RunConfig":
        self.stage.seed = self.sample.seed = self.eval.seed = self.data.master_seed = int(seed)
        return self


def resolve_seed(flag: int | None, configured: int) -> int:
    """Precedence: command-line flag, then SYNCFLOW_SEED, then the config value."""
    if flag is not None:
        return int(flag)
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    return int(configured)


def apply_env_seed(cfg: RunConfig) -> RunConfig:
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        cfg.with_seed(resolve_seed(None, 0))
    return cfg


def _check_type(value, hint, where: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
        return _check_type(value, hint, where)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return [_check_type(v, args[0], f"{where}[]") for v in value]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, where)
    return value


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join((where + '.' if where else '') + k for k in unknown)}")
    kwargs = {k: _check_type(v, hints[k], f"{where}.{k}" if where else k) for k, v in d.items()}
    return cls(**kwargs)
