"""Run configuration as a flat JSON object.

Keys are ``section.field`` (``"model.hidden": 64``) for the nested sections
and bare names for top-level settings (``"stage": "pretrain"``). Unknown keys
and wrongly typed values raise :class:`ConfigError` naming the offending key.
"""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from jamflow.condnet import ModelConfig
from jamflow.evalkit import EvalConfig
from jamflow.optim import OptimConfig
from jamflow.prefalign import DpoConfig
from jamflow.songworld import WorldConfig

STAGES = ("pretrain", "sft", "dpo", "eval")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    clip_seconds: float = 15.0
    strategy: str = "average_sparse"
    p_style: float = 0.10
    p_lyric: float = 0.50
    log_every: int = 50


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    dpo: DpoConfig = field(default_factory=DpoConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    stage: str = "pretrain"
    seed: int = 0
    data_seed: int = 0
    n_songs: int = 256

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage: must be one of {STAGES}, got {self.stage!r}")
        if self.model.latent_channels != self.world.channels:
            raise ConfigError("model.latent_channels: must equal world.channels")
        if self.model.style_dim != self.world.style_dim:
            raise ConfigError("model.style_dim: must equal world.style_dim")
        if self.model.vocab != self.world.n_phonemes + 2:
            raise ConfigError("model.vocab: must equal world.n_phonemes + 2")


_SECTIONS = {f.name: f for f in dataclasses.fields(RunConfig) if dataclasses.is_dataclass(f.default_factory)}


def _check(key: str, value, hint):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        return _check(key, value, next(a for a in args if a is not type(None)))
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{key}: expected a list of {len(args)} values, got {value!r}")
        return tuple(_check(f"{key}[{i}]", v, a) for i, (v, a) in enumerate(zip(value, args)))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported field type {hint}")


def from_flat(obj: dict) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    sections: dict[str, dict] = {name: {} for name in _SECTIONS}
    top: dict = {}
    top_hints = typing.get_type_hints(RunConfig)
    for key, value in obj.items():
        if "." in key:
            sec, _, name = key.partition(".")
            if sec not in _SECTIONS:
                raise ConfigError(f"{key}: unknown section {sec!r}")
            cls = _SECTIONS[sec].default_factory
            hints = typing.get_type_hints(cls)
            if name not in hints:
                raise ConfigError(f"{key}: unknown key")
            sections[sec][name] = _check(key, value, hints[name])
        else:
            if key not in top_hints or key in _SECTIONS:
                raise ConfigError(f"{key}: unknown key")
            top[key] = _check(key, value, top_hints[key])
    try:
        built = {name: _SECTIONS[name].default_factory(**kw) for name, kw in sections.items()}
        return RunConfig(**built, **top)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def to_flat(cfg: RunConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            for sub in dataclasses.fields(value):
                v = getattr(value, sub.name)
                out[f"{f.name}.{sub.name}"] = list(v) if isinstance(v, tuple) else v
        else:
            out[f.name] = value
    return out


def load_config(path: str | Path | None, **overrides) -> RunConfig:
    obj = {}
    if path is not None:
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    obj.update({k: v for k, v in overrides.items() if v is not None})
    return from_flat(obj)


def model_config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(**d)
