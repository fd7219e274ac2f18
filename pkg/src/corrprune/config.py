"""Run configuration: one flat ``key = value`` namespace over the component configs."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .geometry import DEFAULT_EPS
from .network import NetworkConfig
from .synthdata import DatasetSpec
from .training import LossConfig, LrSchedule

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class RunSettings:
    iterations: int = 1000
    batch_size: int = 32
    seed: int = 0
    eps_verify: float = DEFAULT_EPS
    log_every: int = 50
    checkpoint_every: int = 500
    ransac_iterations: int = 1000
    dataset: str = ""
    checkpoint: str = ""
    out: str = ""

    def check(self) -> None:
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        if self.eps_verify <= 0:
            raise ValueError("eps_verify must be > 0")
        if self.log_every < 0 or self.checkpoint_every < 0 or self.ransac_iterations < 1:
            raise ValueError("log_every/checkpoint_every must be >= 0, ransac_iterations >= 1")


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: LrSchedule = field(default_factory=LrSchedule)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    run: RunSettings = field(default_factory=RunSettings)

    def check(self) -> None:
        for part in (self.network, self.loss, self.schedule, self.data, self.run):
            part.check()

    def dataset_spec(self) -> DatasetSpec:
        return dataclasses.replace(self.data, seed=self.run.seed, eps_label=self.loss.eps_label)


# flat key -> (section, field)
KEYS: dict[str, tuple[str, str]] = {
    "d": ("network", "d"),
    "L": ("network", "L"),
    "H": ("network", "H"),
    "po": ("network", "po"),
    "prune_rate": ("network", "prune_rate"),
    "num_modules": ("network", "num_modules"),
    "block_variant": ("network", "block_variant"),
    "predictor_variant": ("network", "predictor_variant"),
    "ff_ratio": ("network", "ff_ratio"),
    "beta": ("loss", "beta"),
    "geo_clamp": ("loss", "geo_clamp"),
    "eps_label": ("loss", "eps_label"),
    "ambiguity_factor": ("loss", "ambiguity_factor"),
    "n_virtual": ("loss", "n_virtual"),
    "lr": ("schedule", "base"),
    "warmup": ("schedule", "warmup"),
    "decay_factor": ("schedule", "decay_factor"),
    "decay_interval": ("schedule", "decay_interval"),
    "num_pairs": ("data", "num_pairs"),
    "n": ("data", "n"),
    "outlier_rate": ("data", "outlier_rate"),
    "noise": ("data", "noise"),
    "max_angle": ("data", "max_angle"),
    "iterations": ("run", "iterations"),
    "batch_size": ("run", "batch_size"),
    "seed": ("run", "seed"),
    "eps_verify": ("run", "eps_verify"),
    "log_every": ("run", "log_every"),
    "checkpoint_every": ("run", "checkpoint_every"),
    "ransac_iterations": ("run", "ransac_iterations"),
    "dataset": ("run", "dataset"),
    "checkpoint": ("run", "checkpoint"),
    "out": ("run", "out"),
}

SECTION_CHECKS = ("network", "loss", "schedule", "data", "run")


def _field_type(section: str, name: str):
    cls = type(getattr(RunConfig(), section))
    return {f.name: f.type for f in dataclasses.fields(cls)}[name]


def _convert(key: str, raw: str, line: int | None):
    section, name = KEYS[key]
    typ = _field_type(section, name)
    raw = raw.strip()
    try:
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {typ if isinstance(typ, str) else typ.__name__}, got {raw!r}", line) from None
    return raw


def parse_lines(text: str) -> list[tuple[str, str, int]]:
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    items = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        items.append((key, value, lineno))
    return items


def parse_override(item: str) -> tuple[str, str]:
    if "=" not in item:
        raise ConfigError(f"override must look like key=value, got {item!r}")
    key, value = (s.strip() for s in item.split("=", 1))
    if key not in KEYS:
        raise ConfigError(f"unknown key {key!r}")
    return key, value


def resolve(text: str = "", overrides=()) -> RunConfig:
    """Defaults, then file text, then overrides (key -> raw string, or 'k=v' items)."""
    cfg = RunConfig()
    where: dict[str, int | None] = {}
    entries = [(k, v, ln) for k, v, ln in parse_lines(text)]
    if isinstance(overrides, dict):
        ov = list(overrides.items())
    else:
        ov = [parse_override(o) for o in overrides]
    for key in (k for k, _ in ov):
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
    entries += [(k, str(v), None) for k, v in ov]
    for key, raw, line in entries:
        section, name = KEYS[key]
        setattr(getattr(cfg, section), name, _convert(key, raw, line))
        where[key] = line
    for section in SECTION_CHECKS:
        try:
            getattr(cfg, section).check()
        except ValueError as exc:
            lines = sorted({ln for k, ln in where.items() if KEYS[k][0] == section and ln is not None})
            raise ConfigError(f"invalid {section} settings: {exc}", lines[-1] if lines else None) from None
    return cfg


def parse_config(path=None, overrides=()) -> RunConfig:
    text = Path(path).read_text() if path else ""
    cfg = resolve(text, overrides)
    log.info("resolved config:\n%s", format_config(cfg))
    return cfg


def format_config(cfg: RunConfig) -> str:
    lines = []
    for key, (section, name) in KEYS.items():
        value = getattr(getattr(cfg, section), name)
        lines.append(f"{key} = {value!r}" if isinstance(value, float) else f"{key} = {value}")
    return "\n".join(lines) + "\n"
