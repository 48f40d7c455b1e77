"""Structured run configuration: nested dataclasses, YAML/JSON files and
dotted-path overrides such as ``sampler.sr_steps=5``."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .errors import ConfigError


@dataclass
class ScheduleSection:
    rule: str = "cosine"
    T: int = 1000
    sigma_max: float = 10.0
    # noise scale of the super-resolution stage; None shares the base schedule
    sr_sigma_max: Optional[float] = 0.1
    T_r: int = 500
    delta_rule: str = "zero"  # "zero" or "eta:<value>"


@dataclass
class TileSection:
    h: int = 0  # 0 disables tiling
    w: int = 0
    overlap: int = 2
    blend: str = "gaussian"


@dataclass
class SamplerSection:
    base_steps: int = 50
    sr_steps: int = 10
    w_base: float = 3.0
    w_sr: float = 1.0
    tile: TileSection = field(default_factory=TileSection)


@dataclass
class ModelSection:
    codec_factor: int = 4
    hidden: int = 32
    blocks: int = 3
    emb_dim: int = 32


@dataclass
class TrainSection:
    n_train: int = 1024
    data_seed: int = 0
    epochs: int = 64
    batch_size: int = 32
    lr: float = 2e-3
    lr_schedule: str = "cosine"
    cond_dropout: float = 0.1
    seed: int = 0


@dataclass
class DistillSection:
    base_initial_steps: int = 32
    base_rounds: int = 3
    sr_initial_steps: int = 8
    sr_rounds: int = 3
    iters_per_round: int = 300
    batch_size: int = 16
    lr: float = 1e-4
    w_min: float = 1.0
    w_max: float = 4.0
    seed: int = 0


@dataclass
class PipelineSection:
    base_resolution: int = 32
    sr_factor: int = 2
    hops: int = 1
    # refuse untiled sampling of latents with more elements than this
    memory_guard: int = 1 << 16


@dataclass
class EvalSection:
    n_test: int = 64
    test_seed: int = 1
    ablation_fractions: tuple = (0.2, 0.4, 0.5, 0.6, 0.8)
    marginal_samples: int = 100_000
    tile_tolerance: float = 1e-2


@dataclass
class ExpansionSection:
    endpoint: Optional[str] = None
    model: str = "caption-expander"
    token_env: str = "RELAYDIFF_EXPANSION_TOKEN"
    timeout: float = 10.0
    retries: int = 3
    backoff: float = 0.5
    fallback: bool = True
    max_concurrency: int = 4


@dataclass
class RunConfig:
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    distill: DistillSection = field(default_factory=DistillSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    eval: EvalSection = field(default_factory=EvalSection)
    expansion: ExpansionSection = field(default_factory=ExpansionSection)
    seed: int = 0
    runs_dir: str = "runs"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Short stable hash of the full configuration."""
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:10]


def _build(cls, data, path=""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(path + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}{name}.")
        else:
            kwargs[name] = _coerce(value, default, path + name)
    return cls(**kwargs)


def _coerce(value, default, name):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponent literals without a dot ("1e-4") as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{name}: expected a string, got {value!r}")
    return value


def from_dict(data: Optional[dict]) -> RunConfig:
    return _build(RunConfig, data or {})


def load_config(path=None, overrides=()) -> RunConfig:
    """Read a YAML or JSON file (or start from defaults) and apply ``key=value`` overrides."""
    data = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for item in overrides:
        set_dotted(data, item)
    return from_dict(data)


def set_dotted(data: dict, item: str):
    """Apply one ``a.b.c=value`` override in place; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"bad override key {key!r}")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-mapping")
    node[parts[-1]] = yaml.safe_load(raw)


def dump_config(cfg: RunConfig, path):
    with open(path, "w") as fh:
        yaml.safe_dump(json.loads(json.dumps(cfg.to_dict(), default=list)), fh, sort_keys=False)
