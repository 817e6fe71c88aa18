"""Experiment configuration: YAML documents mapped onto nested frozen dataclasses.

Every field has a default, so an empty document is a complete
configuration. Unknown keys and type mismatches are rejected with the
dotted path of the offending key.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields, is_dataclass
from pathlib import Path

import yaml

from .bench import KINDS, CollabMode
from .errors import ConfigError, ContractError
from .network import NetworkConfig, compressed_channels
from .scene import GridConfig, SceneConfig, SensorConfig
from .train import LossConfig, TrainConfig

OUTPUT_ENV = "COLLABMI_OUTPUT"
_PAIRS = {"agent_count", "object_count", "object_width", "object_length", "object_height", "dec_channels", "milestones"}
_ELEMENT = {"beam_heights": float, "modes": str, "noise_stds": float, "seeds": int, "milestones": float}


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 200
    n_test: int = 50
    train_seed: int = 0
    test_seed: int = 100_000
    occlusion_only: bool = True
    label_visible_only: bool = True


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 30
    batch_size: int = 4


@dataclass(frozen=True)
class EvalConfig:
    modes: tuple = ("none", "late", "early", "intermediate", "intermediate-alpha0")
    noise_stds: tuple = (0.0, 0.2, 0.4)
    ego: int = 0


@dataclass(frozen=True)
class SweepConfig:
    compression_max_n: int = 8
    feature_channels: int = 256
    heatmap_scenes: int = 2


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneConfig = SceneConfig(agent_count=(3, 3))
    sensor: SensorConfig = SensorConfig()
    grid: GridConfig = GridConfig()
    network: NetworkConfig = NetworkConfig()
    loss: LossConfig = LossConfig()
    data: DataConfig = DataConfig()
    train: TrainSection = TrainSection()
    eval: EvalConfig = EvalConfig()
    sweep: SweepConfig = SweepConfig()
    seeds: tuple = (0,)
    output_dir: str = "runs"

    def train_config(self, alpha: float | None = None, network: NetworkConfig | None = None) -> TrainConfig:
        loss = self.loss if alpha is None else dataclasses.replace(self.loss, alpha=alpha)
        return TrainConfig(self.train.epochs, self.train.batch_size, loss, network or self.network, self.grid)

    def collab_modes(self, noise: bool = False) -> list:
        out = []
        for label in self.eval.modes:
            kind, _, variant = label.partition("-")
            stds = self.eval.noise_stds if noise and kind == "intermediate" else (0.0,)
            out += [CollabMode(kind, noise_std=s, variant=variant) for s in stds]
        return out


# -- conversion ----------------------------------------------------------------------------------
def _type_name(t) -> str:
    return t.__name__


def _coerce(value, target_type, path):
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected bool, got {type(value).__name__}")
        return value
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected int, got {type(value).__name__}")
        return value
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected float, got {type(value).__name__}")
        return float(value)
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected str, got {type(value).__name__}")
        return value
    raise ConfigError(path, f"unsupported field type {_type_name(target_type)}")


def _build(base, doc, path: str):
    """Copy of the dataclass instance ``base`` with the values of ``doc`` applied."""
    cls = type(base)
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(path or "<root>", f"expected a mapping, got {type(doc).__name__}")
    known = {f.name: f for f in fields(cls)}
    for key in doc:
        if key not in known:
            raise ConfigError(f"{path}.{key}" if path else str(key), "unknown key")
    values = {}
    for name, f in known.items():
        sub = f"{path}.{name}" if path else name
        default = getattr(base, name)
        if name not in doc:
            values[name] = default
        elif is_dataclass(default):
            values[name] = _build(default, doc[name], sub)
        elif isinstance(default, tuple):
            raw = doc[name]
            if not isinstance(raw, list):
                raise ConfigError(sub, f"expected a list, got {type(raw).__name__}")
            if name in _PAIRS and len(raw) != len(default):
                raise ConfigError(sub, f"expected {len(default)} values, got {len(raw)}")
            elem = _ELEMENT.get(name) or (type(default[0]) if default else float)
            values[name] = tuple(_coerce(v, elem, f"{sub}[{i}]") for i, v in enumerate(raw))
        else:
            values[name] = _coerce(doc[name], type(default), sub)
    return cls(**values)


def _plain(obj):
    if is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    return obj


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    try:
        cfg.scene.validate()
    except ContractError as exc:
        raise ConfigError("scene", str(exc)) from None
    if cfg.grid.size < 2 or cfg.grid.size % 2:
        raise ConfigError("grid.size", f"must be a positive even number, got {cfg.grid.size}")
    if cfg.grid.resolution <= 0:
        raise ConfigError("grid.resolution", "must be positive")
    if cfg.network.bev_channels != cfg.grid.channels:
        raise ConfigError("network.bev_channels", f"must equal grid.channels ({cfg.grid.channels})")
    try:
        compressed_channels(cfg.network.feature_channels, cfg.network.compress_denominator)
    except ContractError as exc:
        raise ConfigError("network.compress_denominator", str(exc)) from None
    cfg.loss.validate("loss")
    if cfg.train.epochs < 1:
        raise ConfigError("train.epochs", "must be at least 1")
    if cfg.train.batch_size < 1:
        raise ConfigError("train.batch_size", "must be at least 1")
    if cfg.data.n_train < 2 * cfg.train.batch_size:
        raise ConfigError("data.n_train", f"must be at least twice train.batch_size ({2 * cfg.train.batch_size})")
    if cfg.data.n_test < 1:
        raise ConfigError("data.n_test", "must be at least 1")
    if not cfg.seeds:
        raise ConfigError("seeds", "at least one seed is required")
    for i, label in enumerate(cfg.eval.modes):
        kind, _, variant = label.partition("-")
        if kind not in KINDS or variant not in ("", "alpha0") or (variant and kind != "intermediate"):
            raise ConfigError(f"eval.modes[{i}]", f"unknown mode {label!r}")
    for i, s in enumerate(cfg.eval.noise_stds):
        if s < 0:
            raise ConfigError(f"eval.noise_stds[{i}]", "must be non-negative")
    if not 0 <= cfg.eval.ego < cfg.scene.agent_count[0]:
        raise ConfigError("eval.ego", f"must index an agent present in every scene (< {cfg.scene.agent_count[0]})")
    if not 0 <= cfg.sweep.compression_max_n <= 8:
        raise ConfigError("sweep.compression_max_n", "must lie in [0, 8]")
    if cfg.sweep.feature_channels % (1 << cfg.sweep.compression_max_n):
        raise ConfigError("sweep.feature_channels", f"must be divisible by 2^{cfg.sweep.compression_max_n}")
    if not cfg.output_dir:
        raise ConfigError("output_dir", "must not be empty")
    return cfg


def from_dict(doc) -> ExperimentConfig:
    return validate(_build(ExperimentConfig(), doc, ""))


def to_dict(cfg: ExperimentConfig) -> dict:
    return _plain(cfg)


def parse_config(text: str) -> ExperimentConfig:
    try:
        doc = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as exc:
        raise ConfigError("<document>", f"malformed YAML: {exc}".replace("\n", " ")) from None
    return from_dict(doc)


def emit_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=None)


def set_key(doc: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = doc
    for i, part in enumerate(parts[:-1]):
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(".".join(parts[: i + 1]), "is not a section")
        node = child
    node[parts[-1]] = value


def parse_override(item: str):
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(item, "override must look like key=value")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError:
        raise ConfigError(key, f"cannot parse value {raw!r}") from None
    return key.strip(), value


def load_config(path=None, overrides=(), environ=None) -> ExperimentConfig:
    """File values over defaults, then the output-root environment variable, then ``key=value`` overrides."""
    doc = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(str(p), "config file not found")
        try:
            doc = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(str(p), f"malformed YAML: {exc}".replace("\n", " ")) from None
        if not isinstance(doc, dict):
            raise ConfigError(str(p), "top level must be a mapping")
    env = os.environ if environ is None else environ
    if env.get(OUTPUT_ENV):
        doc["output_dir"] = env[OUTPUT_ENV]
    for item in overrides:
        key, value = parse_override(item)
        set_key(doc, key, value)
    return from_dict(doc)

