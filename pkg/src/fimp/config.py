"""Flat TOML experiment configuration.

Every key has a documented default (see ``ExperimentConfig``); unknown keys and
wrongly typed values are rejected before any computation starts.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .data import GeneratorConfig, parse_partition
from .errors import ConfigurationError
from .imputation import Strategy
from .models import ImputerConfig, ModelConfig

SEED_OVERRIDE_ENV = "FIMP_SEED_OVERRIDE"


@dataclass(frozen=True)
class ExperimentConfig:
    partition: str = "8:0:2"
    heterogeneous: bool = False
    imputation: str = "fin"
    rounds: int = 30
    local_epochs: int = 3
    imputer_epochs: int = 3
    lr: float = 1e-4
    batch_size: int = 32
    imputer_batch_size: int = 64
    per_client_n: int = 256
    dirichlet_alpha: float = 0.5
    seeds: tuple[int, ...] = (0, 1, 2)
    # synthetic generator
    latent_dim: int = 16
    d_image: int = 32
    d_text: int = 32
    n_labels: int = 5
    noise_sigma: float = 0.1
    modality_correlation: float = 0.9
    # architecture
    bottleneck: int = 256
    encoder_hidden: tuple[int, ...] = (128,)
    imputer_depth: int = 6
    imputer_heads: int = 4
    imputer_ffn: int = 1024
    # optional feature file replacing the synthetic generator
    features: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "encoder_hidden", tuple(int(h) for h in self.encoder_hidden))
        self.validate()

    def validate(self) -> None:
        parse_partition(self.partition)
        Strategy.parse(self.imputation)
        for name in ("local_epochs", "imputer_epochs", "batch_size", "imputer_batch_size", "per_client_n",
                     "latent_dim", "d_image", "d_text", "n_labels", "bottleneck", "imputer_depth",
                     "imputer_heads", "imputer_ffn"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.rounds < 0:
            raise ConfigurationError(f"rounds must be non-negative, got {self.rounds}")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.dirichlet_alpha <= 0:
            raise ConfigurationError(f"dirichlet_alpha must be positive, got {self.dirichlet_alpha}")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if self.bottleneck % self.imputer_heads:
            raise ConfigurationError(f"bottleneck {self.bottleneck} not divisible by imputer_heads {self.imputer_heads}")
        self.generator_config(0).validate()

    @property
    def strategy(self) -> Strategy:
        return Strategy.parse(self.imputation)

    @property
    def counts(self) -> tuple[int, int, int]:
        return parse_partition(self.partition)

    def generator_config(self, seed: int) -> GeneratorConfig:
        return GeneratorConfig(self.latent_dim, self.d_image, self.d_text, self.n_labels,
                               self.noise_sigma, self.modality_correlation, seed)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            image_dim=self.d_image,
            text_dim=self.d_text,
            n_labels=self.n_labels,
            bottleneck=self.bottleneck,
            encoder_hidden=self.encoder_hidden,
            imputer=ImputerConfig(self.bottleneck, self.imputer_depth, self.imputer_heads, self.imputer_ffn),
        )

    def replace(self, **changes: Any) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, value: Any) -> Any:
    kind = _FIELD_TYPES[key]
    ok = {
        "str": isinstance(value, str),
        "bool": isinstance(value, bool),
        "int": isinstance(value, int) and not isinstance(value, bool),
        "float": isinstance(value, (int, float)) and not isinstance(value, bool),
        "tuple[int, ...]": isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value),
    }[kind]
    if not ok:
        raise ConfigurationError(f"config key {key!r} expects {kind}, got {value!r}")
    if kind == "float":
        return float(value)
    if kind == "tuple[int, ...]":
        return tuple(value)
    return value


def config_from_mapping(raw: dict[str, Any]) -> ExperimentConfig:
    unknown = sorted(set(raw) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    return ExperimentConfig(**{k: _coerce(k, v) for k, v in raw.items()})


def load_config(path: str | Path, apply_env: bool = True) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from None
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ConfigurationError(f"{path}: config must be flat, found tables {nested}")
    cfg = config_from_mapping(raw)
    if apply_env:
        cfg = apply_seed_override(cfg)
    return cfg


def apply_seed_override(cfg: ExperimentConfig) -> ExperimentConfig:
    """``FIMP_SEED_OVERRIDE=1,2,3`` replaces the configured seeds."""
    value = os.environ.get(SEED_OVERRIDE_ENV, "").strip()
    if not value:
        return cfg
    try:
        seeds = tuple(int(tok) for tok in value.split(",") if tok.strip())
    except ValueError:
        raise ConfigurationError(f"{SEED_OVERRIDE_ENV} must be a comma-separated list of integers, got {value!r}") from None
    return cfg.replace(seeds=seeds)


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return "[" + ", ".join(str(v) for v in value) + "]"
    return str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    """Every key with its resolved value, in declaration order."""
    return "".join(f"{f.name} = {_toml_value(getattr(cfg, f.name))}\n" for f in fields(cfg))
