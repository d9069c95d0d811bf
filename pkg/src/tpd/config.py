"""JSON run configuration with strict key checking."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .diffusion import NoiseSchedule, make_schedule
from .nnet import UNetConfig
from .synthdata import GeneratorConfig
from .tryon import COND_CHANNELS, MODES, STATE_CHANNELS, SamplerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    height: int = 32
    width: int = 24
    bbox_margin: int = 1
    num_samples: int = 16
    num_heldout: int = 8
    seed: int = 0

    def generator(self) -> GeneratorConfig:
        return GeneratorConfig(height=self.height, width=self.width, bbox_margin=self.bbox_margin)


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 4)
    attention_levels: tuple = (1, 2)
    num_res_blocks: int = 1
    time_embed_dim: int = 128
    num_heads: int = 4
    norm_groups: int = 8


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 200
    # linear range rescaled by 1000/T so that alpha_bar[T-1] is ~0 at T=200
    beta_start: float = 5e-4
    beta_end: float = 0.1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    steps: int = 20000
    checkpoint_interval: int = 1000
    seed: int = 0


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = "data"
    out_dir: str = "runs"


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    # stochastic DDIM (eta=1) recovers from early x0 errors of a small model; still seeded per sample
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(eta=1.0))
    training: TrainConfig = field(default_factory=TrainConfig)
    mode: str = "satt"
    paths: PathsConfig = field(default_factory=PathsConfig)

    # ---- derived ------------------------------------------------------------
    def canvas(self, mode: str | None = None) -> tuple[int, int]:
        mode = mode or self.mode
        h, w = self.dataset.height, self.dataset.width
        return (2 * h, w) if mode == "satt" else (h, w)

    def unet_config(self, mode: str | None = None) -> UNetConfig:
        mode = mode or self.mode
        m = self.model
        return UNetConfig(
            in_channels=STATE_CHANNELS + COND_CHANNELS[mode],
            out_channels=STATE_CHANNELS,
            base_channels=m.base_channels,
            channel_mults=tuple(m.channel_mults),
            attention_levels=tuple(m.attention_levels),
            num_res_blocks=m.num_res_blocks,
            time_embed_dim=m.time_embed_dim,
            num_heads=m.num_heads,
            norm_groups=m.norm_groups,
        )

    def noise_schedule(self) -> NoiseSchedule:
        s = self.schedule
        return make_schedule(s.T, s.beta_start, s.beta_end)

    def with_mode(self, mode: str) -> "RunConfig":
        return dataclasses.replace(self, mode=mode)

    def with_training(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, training=dataclasses.replace(self.training, **changes))

    # ---- validation / hashing ----------------------------------------------
    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        try:
            self.dataset.generator().validate()
            cfg = self.unet_config()
            cfg.validate(*self.canvas())
            self.noise_schedule()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.dataset.num_samples < 0 or self.dataset.num_heldout < 0:
            raise ConfigError("sample counts must be non-negative")
        if not 1 <= self.sampler.num_steps <= self.schedule.T:
            raise ConfigError(f"sampler.num_steps must be in [1, T={self.schedule.T}]")
        if not 0.0 <= self.sampler.eta <= 1.0:
            raise ConfigError("sampler.eta must be in [0, 1]")
        if self.sampler.dilate_radius < 0:
            raise ConfigError("sampler.dilate_radius must be >= 0")
        t = self.training
        if t.batch_size < 1 or t.steps < 0 or t.checkpoint_interval < 1 or t.lr <= 0:
            raise ConfigError("training: batch_size >= 1, steps >= 0, checkpoint_interval >= 1, lr > 0 required")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def model_hash(self) -> str:
        """Hash of everything a trained checkpoint depends on."""
        d = self.to_dict()
        keep = {k: d[k] for k in ("dataset", "model", "schedule", "training", "mode")}
        # run length and checkpoint cadence do not change the trajectory, so a
        # checkpoint may be resumed under a larger step budget
        del keep["training"]["steps"], keep["training"]["checkpoint_interval"]
        blob = json.dumps(keep, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


_SECTIONS = ("dataset", "model", "schedule", "sampler", "training", "paths")


def _build(base, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name: f for f in dataclasses.fields(base)}
    unknown = sorted(set(raw) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        default = getattr(base, key)
        if isinstance(default, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{where}.{key} must be a list")
            value = tuple(value)
        elif isinstance(default, bool) or not isinstance(default, (int, float)):
            pass
        elif isinstance(default, int) and not isinstance(default, bool):
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{where}.{key} must be an integer")
        elif not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{where}.{key} must be a number")
        else:
            value = float(value)
        kwargs[key] = value
    return dataclasses.replace(base, **kwargs)


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    allowed = set(_SECTIONS) | {"mode"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    defaults = RunConfig()
    kwargs = {name: _build(getattr(defaults, name), raw[name], name) for name in _SECTIONS if name in raw}
    if "mode" in raw:
        kwargs["mode"] = raw["mode"]
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return config_from_dict(raw)
