"""Flat key=value run configuration with shipped dataset presets."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

from .tensor import ConfigurationError
from .trainer import TrainConfig

PRESETS = ("beauty", "games", "fashion", "men")


@dataclass
class RunConfig:
    dataset: str | None = None
    item_attrs: str | None = None
    split: str | None = None
    frequent_count: int = 5000
    sequence_length: int = 50
    embedding: int = 256
    schedule: tuple = ((2, 2), (5, 5), (7, 7))
    batch_size: int = 128
    learning_rate: float = 1e-4
    dropout_rate: float = 0.35
    weight_decay: float = 0.1
    max_epochs: int = 1000
    early_stop_patience: int = 50
    n_train: int = 100
    n_eval: int = 100
    no_intervals: bool = False
    no_residuals: bool = False
    single_conv: bool = False
    avgpool_only: bool = False
    seed: int = 0
    protocol: object = 100          # negative count or "all_items"
    k: int = 10
    groups: str | None = None

    def train_config(self) -> TrainConfig:
        keys = {f.name for f in fields(TrainConfig)}
        picked = {f.name: getattr(self, f.name) for f in fields(self) if f.name in keys}
        schedule = tuple(tuple(int(v) for v in layer) for layer in picked["schedule"])
        picked["schedule"] = schedule
        config = TrainConfig(**picked)
        config.validate()
        return config

    def validate(self) -> None:
        self.train_config()
        if self.protocol != "all_items":
            try:
                negatives = int(self.protocol)
            except (TypeError, ValueError):
                raise ConfigurationError(
                    f"protocol must be a negative count or 'all_items', "
                    f"got {self.protocol!r}") from None
            if negatives < 1:
                raise ConfigurationError("protocol needs at least 1 negative")
        if self.k < 1:
            raise ConfigurationError("k must be at least 1")


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_config_file(path) -> dict:
    """Parse ``key=value`` lines; values are JSON where possible."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        values[key.strip()] = parse_value(value.strip())
    return values


def load_config_source(ref: str) -> dict:
    """Read a config by preset name or file path."""
    if ref in PRESETS:
        preset = resources.files("convseq").joinpath(f"presets/{ref}.cfg")
        with resources.as_file(preset) as path:
            return read_config_file(path)
    if Path(ref).exists():
        return read_config_file(ref)
    raise ConfigurationError(
        f"config {ref!r} is neither a preset ({', '.join(PRESETS)}) nor a file")


def build_run_config(values: dict) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    for key in values:
        if key not in known:
            raise ConfigurationError(f"unknown config key {key!r}")
    config = RunConfig(**values)
    config.validate()
    return config


def write_resolved_config(config: RunConfig, path) -> None:
    """Emit every field as key=value so the run can be replayed exactly."""
    lines = []
    for f in fields(config):
        value = getattr(config, f.name)
        if isinstance(value, str):
            rendered = value
        elif isinstance(value, tuple):
            rendered = json.dumps([list(layer) for layer in value])
        else:
            rendered = json.dumps(value)
        lines.append(f"{f.name}={rendered}")
    Path(path).write_text("\n".join(lines) + "\n")
