"""Run configuration and the flat ``key=value`` config file format."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .attention import FACTOR_MODES
from .augment import AugmentationConfig
from .contrastive import ContrastiveConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


@dataclass
class FinetuneConfig:
    mode: str = "frozen"  # frozen | supervised_scratch
    graph_scope: str = "turn_level"  # turn_level | video_level
    conv_layers: int = 2
    max_epochs: int = 25


@dataclass
class ProbeConfig:
    hidden: int = 80
    dropout: float = 0.1
    max_epochs: int = 30
    patience: int = 5
    lr: float = 1e-3
    batch_size: int = 15


@dataclass
class TrainConfig:
    seed: int = 0
    lr: float = 1e-3
    weight_decay: float = 0.01
    hidden_dim: int = 80
    layers: int = 2
    heads: int = 4
    batch_size: int = 15
    max_seq_len: int = 25
    max_epochs: int = 25
    factor_mode: str = "factorized"
    link_factors: bool = True
    val_fraction: float = 0.2
    aug: AugmentationConfig = field(default_factory=AugmentationConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def validate(self) -> None:
        for key in ("hidden_dim", "layers", "heads", "batch_size", "max_seq_len"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be >= 1")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs", "must be >= 0")
        if self.hidden_dim % self.heads:
            raise ConfigError("heads", f"must divide hidden_dim ({self.hidden_dim})")
        if not self.lr > 0:
            raise ConfigError("lr", "must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be >= 0")
        if self.factor_mode not in FACTOR_MODES:
            raise ConfigError("factor_mode", f"must be one of {FACTOR_MODES}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction", "must be in (0, 1)")
        if self.seed < 0:
            raise ConfigError("seed", "must be >= 0")
        try:
            self.aug.validate()
        except ValueError as err:
            key, _, msg = str(err).partition(": ")
            raise ConfigError(key, msg) from None
        if not self.contrastive.tau > 0:
            raise ConfigError("contrastive.tau", "must be > 0")
        ft = self.finetune
        if ft.mode not in ("frozen", "supervised_scratch"):
            raise ConfigError("finetune.mode", "must be frozen or supervised_scratch")
        if ft.graph_scope not in ("turn_level", "video_level"):
            raise ConfigError("finetune.graph_scope", "must be turn_level or video_level")
        if ft.conv_layers < 0:
            raise ConfigError("finetune.conv_layers", "must be >= 0")
        if ft.max_epochs < 0:
            raise ConfigError("finetune.max_epochs", "must be >= 0")
        pr = self.probe
        for key in ("hidden", "max_epochs", "patience", "batch_size"):
            if getattr(pr, key) < 1:
                raise ConfigError(f"probe.{key}", "must be >= 1")
        if not 0 <= pr.dropout < 1:
            raise ConfigError("probe.dropout", "must be in [0, 1)")
        if not pr.lr > 0:
            raise ConfigError("probe.lr", "must be > 0")

    def to_flat(self) -> dict[str, object]:
        return _flatten(self)

    @classmethod
    def from_flat(cls, items: dict[str, object]) -> "TrainConfig":
        cfg = cls()
        for key, value in items.items():
            set_key(cfg, key, value)
        return cfg


def _flatten(obj, prefix: str = "") -> dict[str, object]:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            out.update(_flatten(value, f"{prefix}{f.name}."))
        elif isinstance(value, tuple):
            out[prefix + f.name] = list(value)
        else:
            out[prefix + f.name] = value
    return out


def _coerce(key: str, hint, value):
    origin = typing.get_origin(hint)
    try:
        if hint is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if hint is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if hint is float:
            return float(value)
        if hint is str:
            return str(value).strip()
        if origin is tuple:
            if isinstance(value, str):
                value = [v.strip() for v in value.split(",") if v.strip()]
            return tuple(str(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"cannot parse {value!r} as {getattr(hint, '__name__', hint)}") from None
    raise ConfigError(key, f"unsupported field type {hint}")


def set_key(cfg, key: str, value) -> None:
    """Assign a dotted key such as ``aug.node_drop`` with type coercion."""
    target = cfg
    parts = key.strip().split(".")
    for part in parts[:-1]:
        sub = getattr(target, part, None)
        if sub is None or not dataclasses.is_dataclass(sub):
            raise ConfigError(key, "unknown key")
        target = sub
    hints = typing.get_type_hints(type(target))
    name = parts[-1]
    if name not in hints or dataclasses.is_dataclass(getattr(target, name, None)):
        raise ConfigError(key, "unknown key")
    setattr(target, name, _coerce(key, hints[name], value))


def parse_config_text(text: str) -> dict[str, str]:
    items = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}", f"expected key=value, got {raw!r}")
        items[key.strip()] = value.strip()
    return items


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """Defaults, then the file, then explicit overrides; validated."""
    cfg = TrainConfig()
    if path is not None:
        for key, value in parse_config_text(Path(path).read_text()).items():
            set_key(cfg, key, value)
    for key, value in (overrides or {}).items():
        set_key(cfg, key, value)
    cfg.validate()
    return cfg


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for key, value in cfg.to_flat().items():
        if isinstance(value, list):
            value = ",".join(value)
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
