"""Plain-text ``key = value`` configuration records.

Keys are dotted ``section.field`` names, one per line; ``#`` starts a
comment. Sections are ``model`` (ModelConfig), ``train`` (TrainConfig),
``loss`` (LossConfig) and ``data`` (DataConfig). Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .objectives import LossConfig
from .separator import ModelConfig, preset


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    max_epochs: int = 200
    lr0: float = 1.0e-3
    lr_dm: float = 2.0e-4
    dm_hold_epochs: int = 50
    warmup_epochs: int = 1
    plateau_factor: float = 0.8
    plateau_patience: int = 3
    weight_decay: float = 0.01
    grad_clip: float = 5.0
    batch_size: int = 4
    seed: int = 0
    dm: bool = False
    checkpoint_every: int = 1
    max_consecutive_failures: int = 10

    def __post_init__(self):
        if self.lr0 <= 0 or self.lr_dm <= 0:
            raise ValueError("learning rates must be positive")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def initial_lr(self) -> float:
        return self.lr_dm if self.dm else self.lr0


@dataclass
class DataConfig:
    root: str = ""
    train_manifest: str = "train.txt"
    val_manifest: str = "val.txt"
    test_manifest: str = "test.txt"
    segment_seconds: float = 4.0
    sample_rate: int = 8000


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)

    SECTIONS = ("model", "train", "loss", "data")

    def to_text(self) -> str:
        lines = []
        for section in self.SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                lines.append(f"{section}.{f.name} = {format_value(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def updated(self, pairs: dict) -> "RunConfig":
        """Apply ``{"section.field": value-or-text}`` overrides; validates the result."""
        grouped = {s: {} for s in self.SECTIONS}
        for key, value in pairs.items():
            section, _, name = key.partition(".")
            if section not in grouped or not name:
                raise ConfigError(f"unknown config key {key!r}")
            obj = getattr(self, section)
            types = typing.get_type_hints(type(obj))
            if name not in {f.name for f in dataclasses.fields(obj)}:
                raise ConfigError(f"unknown config key {key!r}")
            grouped[section][name] = coerce(value, types[name], key) if isinstance(value, str) else value
        try:
            return RunConfig(**{s: dataclasses.replace(getattr(self, s), **grouped[s]) for s in self.SECTIONS})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        return (base or cls()).updated(parse_pairs(text))

    @classmethod
    def read(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        return cls.from_text(p.read_text(encoding="utf-8"), base)

    @classmethod
    def from_preset(cls, name: str) -> "RunConfig":
        try:
            return cls(model=preset(name))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def parse_pairs(text: str) -> dict:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key = key.strip()
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value.strip()
    return pairs


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def coerce(text: str, typ, key: str = ""):
    origin = typing.get_origin(typ)
    if origin is typing.Union or str(origin) == "types.UnionType":
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if text.lower() in ("none", "null", ""):
            return None
        typ = args[0]
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return str(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
