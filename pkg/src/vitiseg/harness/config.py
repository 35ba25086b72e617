"""Training configuration and its ``key = value`` file format.

Keys are exactly the :class:`TrainConfig` field names. Text after
``#`` or ``;`` is a comment. Tuples are written comma-separated
(``aug_zoom_range = 0.8, 1.2``) and booleans as true/false.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from ..errors import ConfigError
from ..imaging import AugmentParams
from ..models import EncoderVariant, UNetConfig

LOSSES = ("bce-ji",)
OPTIMIZERS = ("nadam",)


@dataclass(frozen=True)
class TrainConfig:
    # Tuned values from the reference study.
    lr: float = 0.000336375
    lr_decay: float = 8.806e-5
    weight_decay: float = 0.000158
    dropout: float = 0.0136
    epochs: int = 165
    batch_size: int = 8
    loss: str = "bce-ji"
    optimizer: str = "nadam"
    # Desk-scale model.
    variant: str = "PLAIN"
    input_size: int = 64
    width_factor: float = 0.125
    use_batch_norm: bool = True
    norm_scope: str = "decoder"
    dtype: str = "float32"
    # Augmentation.
    augment: bool = True
    aug_rotation_deg_max: float = 180.0
    aug_shift_frac: float = 0.05
    aug_h_flip: bool = True
    aug_v_flip: bool = True
    aug_zoom_range: tuple = (0.8, 1.2)
    aug_brightness_range: tuple = (0.7, 1.3)
    # Data and bookkeeping.
    combine: bool = False
    threshold: float = 0.65
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("lr", "lr_decay", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1 or (self.use_batch_norm and self.batch_size < 2):
            raise ConfigError("batch_size must be at least 2 when batch norm is enabled")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must be in [0, 1]")
        try:
            EncoderVariant(self.variant)
        except ValueError:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {[v.value for v in EncoderVariant]}") from None
        self.unet_config().validate()
        self.augment_params()

    def unet_config(self) -> UNetConfig:
        return UNetConfig(input_size=self.input_size, variant=self.variant, width_factor=self.width_factor,
                          dropout_rate=self.dropout, use_batch_norm=self.use_batch_norm,
                          norm_scope=self.norm_scope, dtype=self.dtype)

    def augment_params(self) -> AugmentParams:
        if not self.augment:
            return AugmentParams.identity()
        return AugmentParams(self.aug_rotation_deg_max, self.aug_shift_frac, self.aug_h_flip, self.aug_v_flip,
                             self.aug_zoom_range, self.aug_brightness_range)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = str(value).lower()
            elif isinstance(value, tuple):
                value = ", ".join(repr(v) for v in value)
            else:
                value = repr(value) if isinstance(value, float) else value
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


PRESETS = {
    "desk": TrainConfig(),
    "paper-224": TrainConfig(input_size=224, width_factor=1.0, variant="INCEPTION_RESNET_MINI"),
}

_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "tuple":
            return tuple(float(v) for v in raw.split(","))
        return raw.strip("\"'")
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Apply ``key = value`` lines on top of ``base`` (default: the desk preset)."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[config]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    values = dict(parser["config"])
    unknown = sorted(set(values) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    base = base or TrainConfig()
    return base.replace(**{k: _convert(k, v) for k, v in values.items()})


def load_config(path: str | os.PathLike | None, base: TrainConfig | None = None) -> TrainConfig:
    if path is None:
        return base or TrainConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, base)


def preset(name: str) -> TrainConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
