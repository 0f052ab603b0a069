"""Run configuration: nested dataclasses and a flat ``dotted.key = value`` text format.

Example file::

    seed = 3
    schedule.epochs_a = 150
    network.encoder.widths = 16, 32, 64, 128
    eval.part_map = legs:3,4,5,6; tail:2; ears:7,8; face:1
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

from .artmodel import TOY_PART_MAP, ToySpec
from .datagen import CameraSpec
from .losses import LossWeights
from .neural import NetworkConfig

ENV_VAR = "C2F_CONFIG"


class ConfigParseError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    path: str = ""  # empty: build the toy quadruped
    toy: ToySpec = ToySpec()
    seed: int = 0


@dataclass(frozen=True)
class DataConfig:
    count: int = 200
    holdout: int = 40
    seed: int = 7
    camera: CameraSpec = CameraSpec()


@dataclass(frozen=True)
class Schedule:
    epochs_a: int = 150
    epochs_b: int = 10
    epochs_c: int = 150
    lr_a: float = 1e-4
    lr_b: float = 1e-4
    lr_c: float = 1e-5
    batch_size: int = 8
    clip_norm: float = 10.0
    checkpoint_every: int = 0  # epochs; 0 = stage boundaries only
    limit_always: bool = False
    sharpness: float = 60.0

    def __post_init__(self):
        if min(self.epochs_a, self.epochs_b, self.epochs_c) < 0:
            raise ConfigParseError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigParseError("batch_size must be >= 1")

    def stages(self):
        return (("A", self.epochs_a, self.lr_a), ("B", self.epochs_b, self.lr_b), ("C", self.epochs_c, self.lr_c))


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.15
    part_map: dict = field(default_factory=lambda: {k: tuple(v) for k, v in TOY_PART_MAP.items()})
    tto_iterations: int = 10
    tto_lr: float = 0.003
    tto_sharpness: float = 20.0


@dataclass(frozen=True)
class Config:
    seed: int = 0
    model: ModelConfig = ModelConfig()
    data: DataConfig = DataConfig()
    network: NetworkConfig = NetworkConfig()
    weights: LossWeights = LossWeights()
    schedule: Schedule = Schedule()
    eval: EvalConfig = EvalConfig()


def full_scale_preset():
    """Full-scale schedule and input resolution; far beyond a desk CPU budget."""
    cfg = Config()
    return dataclasses.replace(
        cfg,
        data=dataclasses.replace(cfg.data, camera=dataclasses.replace(cfg.data.camera, image_size=224,
                                                                      focal_range=(315.0, 455.0))),
        schedule=dataclasses.replace(cfg.schedule, epochs_a=200, epochs_b=10, epochs_c=200),
    )


# ------------------------------------------------------------------ parsing


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, dict):
        return "; ".join(f"{k}:" + ",".join(str(i) for i in v) for k, v in value.items())
    return str(value)


def _parse_like(text, default, key):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(t) for t in items)
        if isinstance(default, dict):
            out = {}
            for part in text.split(";"):
                if not part.strip():
                    continue
                name, idx = part.split(":", 1)
                out[name.strip()] = tuple(int(i) for i in idx.split(",") if i.strip())
            return out
        return text
    except ValueError as exc:
        raise ConfigParseError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from exc


def flatten(cfg, prefix=""):
    """Ordered (dotted key, value) pairs for every leaf field."""
    out = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value):
            out.extend(flatten(value, key + "."))
        else:
            out.append((key, value))
    return out


def set_value(cfg, key, text):
    head, _, rest = key.partition(".")
    names = {f.name for f in dataclasses.fields(cfg)}
    if head not in names:
        raise ConfigParseError(f"unknown config key {key!r}")
    current = getattr(cfg, head)
    if rest:
        if not dataclasses.is_dataclass(current):
            raise ConfigParseError(f"unknown config key {key!r}")
        new = set_value(current, rest, text)
    else:
        if dataclasses.is_dataclass(current):
            raise ConfigParseError(f"{key!r} is a section, not a value")
        new = _parse_like(text, current, key)
    try:
        return dataclasses.replace(cfg, **{head: new})
    except (ValueError, TypeError) as exc:
        raise ConfigParseError(f"{key}: {exc}") from exc


def apply_overrides(cfg, pairs):
    for key, text in pairs:
        cfg = set_value(cfg, key, text)
    return cfg


def parse_text(text, base=None):
    cfg = base if base is not None else Config()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParseError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        try:
            cfg = set_value(cfg, key.strip(), value)
        except ConfigParseError as exc:
            raise ConfigParseError(f"line {lineno}: {exc}") from exc
    return cfg


def load_config(path=None, base=None):
    """Read ``path`` (or the file named by $C2F_CONFIG); defaults if neither is given."""
    path = path or os.environ.get(ENV_VAR)
    if not path:
        return base if base is not None else Config()
    with open(path) as fh:
        return parse_text(fh.read(), base)


def dump_config(cfg):
    return "".join(f"{k} = {_format(v)}\n" for k, v in flatten(cfg))


def to_dict(cfg):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in flatten(cfg)}



def image_size(cfg):
    """Network input resolution (square)."""
    return cfg.data.camera.image_size
