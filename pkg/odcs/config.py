"""
Training configuration
======================

Plain ``key = value`` text, one field per line, ``#`` comments::

    train_manifest = data/manifest.txt
    checkpoint_dir = runs/demo
    seed = 7
    width_scale = 1/8
    input_size = 64

Fields not given keep their defaults. Unknown or repeated keys are errors.
"""

import dataclasses
import math
from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path
from typing import Dict, Optional

from .data import AugmentConfig
from .errors import ConfigError
from .losses import LossConfig
from .network import FeatureExtractorConfig, GeneratorConfig
from .raster import PathLike

# Field names that differ from their file keys
_KEY_FOR_FIELD = {"lambda_": "lambda"}
_FIELD_FOR_KEY = {v: k for k, v in _KEY_FOR_FIELD.items()}
_PATH_FIELDS = ("train_manifest", "checkpoint_dir")


@dataclass(frozen=True)
class TrainConfig:
    train_manifest: str = ""
    checkpoint_dir: str = "checkpoints"
    seed: int = 0
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 10
    max_steps: int = 0
    lambda_: float = 150.0
    smooth: float = 1e-6
    width_scale: Fraction = Fraction(1)
    input_size: int = 256
    leaky_slope: float = 0.2
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    init_std: float = 0.02
    extractor_trainable: bool = False
    hflip: bool = True
    vflip: bool = True
    scale: bool = True
    scale_min: float = 0.9
    scale_max: float = 1.1
    illumination: bool = True
    illumination_min: float = 0.8
    illumination_max: float = 1.2
    debug: bool = False

    def __post_init__(self):
        validate(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            width_scale=self.width_scale, input_size=self.input_size, init_seed=self.seed,
            init_std=self.init_std, leaky_slope=self.leaky_slope,
            bn_momentum=self.bn_momentum, bn_eps=self.bn_eps,
        )

    def extractor_config(self) -> FeatureExtractorConfig:
        return FeatureExtractorConfig(
            width_scale=self.width_scale, input_size=self.input_size, init_seed=self.seed + 1,
            init_std=self.init_std, leaky_slope=self.leaky_slope,
            bn_momentum=self.bn_momentum, bn_eps=self.bn_eps,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(lambda_=self.lambda_, smooth=self.smooth)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            hflip=self.hflip, vflip=self.vflip, scale=self.scale, illumination=self.illumination,
            scale_range=(self.scale_min, self.scale_max),
            illumination_range=(self.illumination_min, self.illumination_max),
        )


def _require(ok: bool, message: str):
    if not ok:
        raise ConfigError(message)


def validate(cfg: TrainConfig):
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, float) and not math.isfinite(value):
            raise ConfigError(f"{_key(f.name)} must be finite, got {value}")
    _require(cfg.lr > 0, f"lr must be positive, got {cfg.lr}")
    _require(0 <= cfg.beta1 < 1, f"beta1 must lie in [0, 1), got {cfg.beta1}")
    _require(0 <= cfg.beta2 < 1, f"beta2 must lie in [0, 1), got {cfg.beta2}")
    _require(cfg.eps > 0, f"eps must be positive, got {cfg.eps}")
    _require(cfg.batch_size >= 1, f"batch_size must be at least 1, got {cfg.batch_size}")
    _require(cfg.epochs >= 1, f"epochs must be at least 1, got {cfg.epochs}")
    _require(cfg.max_steps >= 0, f"max_steps must be non-negative, got {cfg.max_steps}")
    _require(cfg.lambda_ >= 0, f"lambda must be non-negative, got {cfg.lambda_}")
    _require(cfg.smooth > 0, f"smooth must be positive, got {cfg.smooth}")
    _require(0 < cfg.width_scale <= 1, f"width_scale must lie in (0, 1], got {cfg.width_scale}")
    _require(cfg.input_size > 0 and cfg.input_size % 2 == 0,
             f"input_size must be a positive even integer, got {cfg.input_size}")
    _require(cfg.leaky_slope >= 0, f"leaky_slope must be non-negative, got {cfg.leaky_slope}")
    _require(cfg.bn_eps > 0, f"bn_eps must be positive, got {cfg.bn_eps}")
    _require(0 < cfg.bn_momentum <= 1, f"bn_momentum must lie in (0, 1], got {cfg.bn_momentum}")
    _require(cfg.init_std > 0, f"init_std must be positive, got {cfg.init_std}")
    _require(0 < cfg.scale_min <= cfg.scale_max,
             f"scale range must satisfy 0 < scale_min <= scale_max, got [{cfg.scale_min}, {cfg.scale_max}]")
    _require(0 <= cfg.illumination_min <= cfg.illumination_max,
             f"illumination range must satisfy 0 <= min <= max, got [{cfg.illumination_min}, {cfg.illumination_max}]")


def _key(field_name: str) -> str:
    return _KEY_FOR_FIELD.get(field_name, field_name)


def _parse_value(kind, text: str, key: str):
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered not in ("true", "false"):
                raise ValueError("expected true or false")
            return lowered == "true"
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is Fraction:
            return Fraction(text)
        return text
    except (ValueError, ZeroDivisionError) as e:
        raise ConfigError(f"invalid value for {key}: {text!r} ({e})") from e


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, base_dir: Optional[PathLike] = None) -> TrainConfig:
    """
    Parse ``key = value`` text. Relative paths resolve against ``base_dir``
    when it is given.
    """
    types = {f.name: f.type for f in fields(TrainConfig)}
    values: Dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        name = _FIELD_FOR_KEY.get(key, key)
        if name not in types or name in _KEY_FOR_FIELD and key != _key(name):
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if name in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        kind = types[name]
        if isinstance(kind, str):
            kind = {"str": str, "int": int, "float": float, "bool": bool, "Fraction": Fraction}[kind]
        parsed = _parse_value(kind, value, key)
        if name in _PATH_FIELDS and base_dir is not None and parsed:
            path = Path(parsed)
            if not path.is_absolute():
                parsed = str(Path(base_dir) / path)
        values[name] = parsed
    return TrainConfig(**values)  # type: ignore[arg-type]


def load_config(path: PathLike) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text, base_dir=path.parent)


def dump_config(cfg: TrainConfig) -> str:
    """Every field, in declaration order; ``parse_config(dump_config(c)) == c``"""
    return "".join(f"{_key(f.name)} = {_format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))
