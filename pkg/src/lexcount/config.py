"""One structured config tree controls every constant; CLI flags override file values."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .counter import CounterConfig
from .errors import ConfigError
from .fusion import VARIANTS, FusionConfig
from .lang_encoder import LangEncoderConfig
from .vis_encoder import VisEncoderConfig


@dataclass
class DataConfig:
    input_size: int = 64  # 640 at paper scale
    mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    std: tuple[float, ...] = (0.5, 0.5, 0.5)


@dataclass
class TrainConfig:
    variant: str = "full"  # E | EV | full
    lr: float = 5e-4  # paper scale: 1e-5 with batch 15
    batch_size: int = 8
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 500
    eval_every: int = 50
    seed: int = 0
    clip_norm: float = 10.0
    augment: bool = True
    data_root: str = "corpus"
    out_dir: str = "runs/desk"


@dataclass
class AnnotateConfig:
    max_retries: int = 3
    timeout: float = 5.0
    concurrency: int = 1
    backoff_base: float = 1.0


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    lang: LangEncoderConfig = field(default_factory=LangEncoderConfig)
    vis: VisEncoderConfig = field(default_factory=VisEncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    counter: CounterConfig = field(default_factory=CounterConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    annotate: AnnotateConfig = field(default_factory=AnnotateConfig)

    def finalized(self) -> "Config":
        """Propagate the shared input size and validate cross-module constraints."""
        cfg = replace(
            self,
            vis=replace(self.vis, input_size=self.data.input_size),
            counter=replace(self.counter, input_size=self.data.input_size),
        )
        if cfg.train.variant not in VARIANTS:
            raise ConfigError(f"train.variant must be one of {VARIANTS}, got {cfg.train.variant!r}")
        try:
            cfg.lang.validate()
            cfg.vis.validate()
            cfg.fusion.validate()
            cfg.counter.validate()
        except ConfigError:
            raise
        except Exception as exc:
            raise ConfigError(str(exc))
        if cfg.train.variant != "E" and cfg.vis.width != cfg.fusion.width:
            raise ConfigError("vis.width must equal fusion.width (visual tokens are not projected)")
        if cfg.train.batch_size < 1 or cfg.train.steps < 1 or cfg.train.eval_every < 1:
            raise ConfigError("train.batch_size, train.steps and train.eval_every must be positive")
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _coerce(section: str, key: str, value, current):
    dotted = f"{section}.{key}"
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"{dotted} expects a boolean, got {value!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or isinstance(value, float) and not float(value).is_integer():
            raise ConfigError(f"{dotted} expects an integer, got {value!r}")
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{dotted} expects an integer, got {value!r}")
    if isinstance(current, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{dotted} expects a number, got {value!r}")
    if isinstance(current, tuple):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v != ""]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{dotted} expects a list, got {value!r}")
        elem = current[0] if current else 0.0
        return tuple(_coerce(section, key, v, elem) for v in value)
    if isinstance(current, str):
        return str(value)
    raise ConfigError(f"{dotted} has unsupported type")


def _apply(cfg: Config, section: str, key: str, value) -> None:
    if not hasattr(cfg, section) or not dataclasses.is_dataclass(getattr(cfg, section)):
        raise ConfigError(f"unknown config section {section!r}")
    target = getattr(cfg, section)
    if key not in {f.name for f in dataclasses.fields(target)}:
        raise ConfigError(f"unknown config key {section}.{key}")
    setattr(target, key, _coerce(section, key, value, getattr(target, key)))


def load_config(path=None, overrides: list[str] | None = None) -> Config:
    """Defaults <- TOML file <- `--set section.key=value` overrides."""
    cfg = Config()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        try:
            raw = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid TOML: {exc}")
        for section, body in raw.items():
            if not isinstance(body, dict):
                raise ConfigError(f"top-level config key {section!r} must be a table")
            for key, value in body.items():
                _apply(cfg, section, key, value)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, value = item.split("=", 1)
        if dotted.count(".") != 1:
            raise ConfigError(f"override key {dotted!r} must look like section.key")
        section, key = dotted.split(".")
        _apply(cfg, section, key, value)
    return cfg.finalized()


def config_from_dict(d: dict) -> Config:
    """Rebuild a Config from its to_dict() form (used by checkpoints)."""
    cfg = Config()
    for section, body in d.items():
        for key, value in body.items():
            _apply(cfg, section, key, value)
    return cfg.finalized()
