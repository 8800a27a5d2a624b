"""Experiment configuration: TOML file -> validated dataclasses.

Example::

    method = "mocl"
    seeds = [1, 2, 3]
    output_dir = "runs/near"
    protocol = "both"

    [data]
    n_tasks = 4
    rho = 0.9

    [peft]
    kind = "prefix"
    prefix_len = 16
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from mocl.data import SuiteConfig
from mocl.errors import ConfigurationError
from mocl.learner import METHODS, TrainConfig
from mocl.model import ModelConfig
from mocl.peft import PeftConfig

__version__ = "0.1.0"
PROTOCOL_CHOICES = ("TIL", "CIL", "both")


@dataclass(frozen=True)
class BackboneConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 32
    vocab_max: int = 2048
    warm: bool = True
    warm_epochs: int = 3
    warm_corpus: int = 1000
    warm_lr: float = 1e-3

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, d_model=self.d_model, n_layers=self.n_layers,
                           n_heads=self.n_heads, d_ff=self.d_ff, max_len=self.max_len)


@dataclass(frozen=True)
class DataConfig:
    """``corpus`` switches from the generator to a JSON-lines file."""

    corpus: str | None = None
    seed: int | None = None  # None: use the run seed
    n_tasks: int = 4
    classes_per_task: int = 2
    n_train: int = 32
    n_val: int = 16
    n_test: int = 64
    vocab_size: int = 1000
    class_tokens: int = 12
    background_tokens: int = 24
    rho: float = 0.0
    signal: float = 0.35
    min_len: int = 8
    max_len: int = 16
    interference: bool = False
    order: tuple[int, ...] | None = None

    def suite_config(self, run_seed: int) -> SuiteConfig:
        kw = {f.name: getattr(self, f.name) for f in dataclasses.fields(SuiteConfig) if f.name != "seed"}
        return SuiteConfig(seed=self.seed if self.seed is not None else run_seed, **kw)


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "mocl"
    seeds: tuple[int, ...] = (1,)
    output_dir: str = "runs"
    protocol: str = "both"
    compute_fwt: bool = True
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    peft: PeftConfig = field(default_factory=PeftConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.protocol not in PROTOCOL_CHOICES:
            raise ConfigurationError(f"protocol must be one of {PROTOCOL_CHOICES}")
        if not self.seeds:
            raise ConfigurationError("seeds must not be empty")
        if self.method == "progressive" and self.peft.kind != "prefix":
            raise ConfigurationError("method 'progressive' requires peft.kind = 'prefix'")

    @property
    def protocols(self) -> tuple[str, ...]:
        return ("TIL", "CIL") if self.protocol == "both" else (self.protocol,)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        """Hash of everything except where outputs go and which seeds run."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("seeds")
        blob = json.dumps(d, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_SECTIONS = {"backbone": BackboneConfig, "peft": PeftConfig, "train": TrainConfig, "data": DataConfig}


def _build(cls, values: dict, where: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(names))
    if unknown:
        raise ConfigurationError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    kw = {}
    for k, v in values.items():
        if isinstance(v, list):
            v = tuple(v)
        kw[k] = v
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigurationError(f"[{where}]: {exc}") from exc


def from_dict(raw: dict) -> ExperimentConfig:
    top = {}
    sections = {}
    for k, v in raw.items():
        if k in _SECTIONS:
            if not isinstance(v, dict):
                raise ConfigurationError(f"[{k}] must be a table")
            sections[k] = _build(_SECTIONS[k], v, k)
        else:
            top[k] = v
    cfg = _build(ExperimentConfig, top, "top level")
    cfg = dataclasses.replace(cfg, **sections)
    _check_types(cfg)
    return cfg


def _check_types(cfg: ExperimentConfig) -> None:
    for section in (cfg, cfg.backbone, cfg.peft, cfg.train, cfg.data):
        for f in dataclasses.fields(section):
            v = getattr(section, f.name)
            default = f.default if f.default is not dataclasses.MISSING else None
            if default is None or dataclasses.is_dataclass(v):
                continue
            if isinstance(default, bool) and not isinstance(v, bool):
                raise ConfigurationError(f"{f.name} must be a boolean")
            if isinstance(default, (int, float)) and not isinstance(default, bool):
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise ConfigurationError(f"{f.name} must be a number")
                if isinstance(default, int) and not isinstance(default, bool) and not isinstance(v, int):
                    raise ConfigurationError(f"{f.name} must be an integer")
            if isinstance(default, str) and not isinstance(v, str):
                raise ConfigurationError(f"{f.name} must be a string")


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    return from_dict(raw)
