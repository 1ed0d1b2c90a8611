"""Flat ``key = value`` experiment configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from ..ticket_search import SearchConfig

MODES = ("slt_dense", "slt_pruned", "slt_frozen", "weight_training")

# pre-pruning margin below the target sparsity for pruning-only sources
PRUNED_ONLY_MARGIN = 0.05


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    mode: str = "slt_frozen"
    arch: str = "conv2"
    width: float = 1.0
    batchnorm: bool = False
    dataset: str = "mnist"
    data_path: Optional[str] = None
    train_limit: Optional[int] = None
    seed: int = 0
    freeze_ratio: float = 0.0
    slt_sparsity: float = 0.5
    strategy: str = "epl"
    prune_ratio: Optional[float] = None
    lock_ratio: Optional[float] = None
    exempt_boundary_layers: bool = False
    init: str = "kaiming_uniform"
    optimizer: str = "sgd_momentum"
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 100
    topk_interval: int = 1
    repetitions: int = 3

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.mode == "slt_dense" and (self.freeze_ratio or self.prune_ratio or self.lock_ratio):
            raise ConfigError("slt_dense requires freeze_ratio = 0 and no ratio overrides")
        if self.mode == "slt_pruned" and self.lock_ratio:
            raise ConfigError("slt_pruned requires lock_ratio = 0")
        if self.strategy not in ("epl", "erk"):
            raise ConfigError(f"strategy must be epl or erk, got {self.strategy!r}")
        self.search_config()

    def search_config(self) -> SearchConfig:
        try:
            return SearchConfig(self.optimizer, self.lr0, self.momentum, self.weight_decay, self.batch_size,
                                self.epochs, "cosine", self.topk_interval)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def plan_ratios(self):
        """(freeze_ratio, prune_override, lock_override) for this mode."""
        if self.mode == "slt_dense":
            return 0.0, 0.0, 0.0
        if self.mode == "slt_pruned":
            p = self.prune_ratio if self.prune_ratio is not None else round(self.slt_sparsity - PRUNED_ONLY_MARGIN, 10)
            return p, max(p, 0.0), 0.0
        if self.prune_ratio is not None or self.lock_ratio is not None:
            p = self.prune_ratio or 0.0
            l = self.lock_ratio or 0.0
            return p + l, p, l
        return self.freeze_ratio, None, None

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def echo(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(field_type, raw: str):
    raw = raw.strip()
    t = str(field_type)
    if raw.lower() in ("none", "null", "") and "Optional" in t:
        return None
    if "bool" in t:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if "int" in t:
        return int(raw)
    if "float" in t:
        return float(raw)
    return raw


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def parse_pairs(pairs, base: Optional[dict] = None) -> dict:
    out = dict(base or {})
    for lineno, line in enumerate(pairs, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            out[key] = _coerce(_FIELDS[key].type, value)
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from e
    return out


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Read a config file (optional) and apply ``key=value`` overrides on top."""
    values = {}
    if path is not None:
        values = parse_pairs(Path(path).read_text().splitlines())
    values = parse_pairs(overrides, values)
    return ExperimentConfig(**values)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for k, v in cfg.echo().items():
        lines.append(f"{k} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"
