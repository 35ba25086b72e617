"""Miniature U-Nets with a swappable contracting path.

Layer table (width factor w, channels scaled as max(1, round(c * w))):

    encoder stage k (k = 0..3), output e_k at scale 1/2^k:
        PLAIN                  conv3 -> conv3
        VGG_MINI               2 convs (stages 0, 1), 3 convs (stages 2, 3)
        RESNET_MINI            conv3 -> residual block
        INCEPTION_MINI         conv3 -> inception block
        INCEPTION_RESNET_MINI  conv3 -> inception block with residual shortcut
        SE_MINI                conv3 -> residual block -> squeeze-excitation
    bottleneck at 1/16         maxpool -> conv3(b) -> dropout -> conv3(b)
    decoder stage j (j = 0..3) upsample -> concat skip e_{3-j} -> conv3(d_j) -> conv3(d_j)
    decoder stage 4            conv3(d_4) -> conv3(d_4) at full resolution
    head                       conv1(2) -> channel softmax

Every "conv3" above is conv -> [batch norm] -> ELU. Batch norm is applied in
the decoder whenever ``use_batch_norm`` is set, and in the encoder too when
``norm_scope == "both"``.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from ..autodiff import ops
from ..autodiff.tensor import Tensor
from ..errors import ConfigError, UsageError
from .blocks import InceptionBlock, ResidualBlock, SEBlock
from .layers import Conv2d, ConvUnit, Module


class EncoderVariant(str, enum.Enum):
    PLAIN = "PLAIN"
    VGG_MINI = "VGG_MINI"
    RESNET_MINI = "RESNET_MINI"
    INCEPTION_MINI = "INCEPTION_MINI"
    INCEPTION_RESNET_MINI = "INCEPTION_RESNET_MINI"
    SE_MINI = "SE_MINI"


NORM_SCOPES = ("decoder", "both")


@dataclass(frozen=True)
class UNetConfig:
    input_size: int = 64
    variant: EncoderVariant = EncoderVariant.PLAIN
    width_factor: float = 0.125
    decoder_channels: tuple = (512, 256, 128, 64, 32)
    encoder_channels: tuple = (32, 64, 128, 256)
    bottleneck_units: int = 512
    dropout_rate: float = 0.0
    use_batch_norm: bool = True
    norm_scope: str = "decoder"
    se_reduction: int = 4
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "variant", EncoderVariant(self.variant))
        object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))

    def scaled(self, c: int) -> int:
        return max(1, int(round(c * self.width_factor)))

    @property
    def decoder_widths(self) -> tuple:
        return tuple(self.scaled(c) for c in self.decoder_channels)

    @property
    def encoder_widths(self) -> tuple:
        return tuple(self.scaled(c) for c in self.encoder_channels)

    @property
    def bottleneck_width(self) -> int:
        return self.scaled(self.bottleneck_units)

    def validate(self) -> None:
        if self.input_size <= 0 or self.input_size % 16:
            raise ConfigError(f"input_size must be a positive multiple of 16, got {self.input_size}")
        if len(self.decoder_channels) != 5:
            raise ConfigError("decoder_channels needs exactly 5 entries")
        widths = self.decoder_widths
        if any(a <= b for a, b in zip(self.decoder_channels, self.decoder_channels[1:])) or \
                any(a <= b for a, b in zip(widths, widths[1:])):
            raise ConfigError(f"decoder_channels must be strictly decreasing after scaling, got {widths}")
        if len(self.encoder_channels) != 4:
            raise ConfigError("encoder_channels needs exactly 4 entries")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.norm_scope not in NORM_SCOPES:
            raise ConfigError(f"norm_scope must be one of {NORM_SCOPES}")
        if self.width_factor <= 0:
            raise ConfigError("width_factor must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["decoder_channels"] = list(self.decoder_channels)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


class EncoderStage(Module):
    def __init__(self, variant: EncoderVariant, stage: int, in_ch: int, ch: int,
                 rng: np.random.Generator, norm: bool, se_reduction: int, dtype):
        self.units = [ConvUnit(in_ch, ch, 3, rng, norm, dtype)]
        self.blocks: list = []
        if variant == EncoderVariant.PLAIN:
            self.units.append(ConvUnit(ch, ch, 3, rng, norm, dtype))
        elif variant == EncoderVariant.VGG_MINI:
            for _ in range(1 if stage < 2 else 2):
                self.units.append(ConvUnit(ch, ch, 3, rng, norm, dtype))
        elif variant == EncoderVariant.RESNET_MINI:
            self.blocks = [ResidualBlock(ch, ch, rng, norm, dtype)]
        elif variant == EncoderVariant.INCEPTION_MINI:
            self.blocks = [InceptionBlock(ch, ch, rng, norm, residual=False, dtype=dtype)]
        elif variant == EncoderVariant.INCEPTION_RESNET_MINI:
            self.blocks = [InceptionBlock(ch, ch, rng, norm, residual=True, dtype=dtype)]
        elif variant == EncoderVariant.SE_MINI:
            self.blocks = [ResidualBlock(ch, ch, rng, norm, dtype), SEBlock(ch, rng, se_reduction, dtype)]

    def forward(self, x: Tensor, mode: str) -> Tensor:
        for unit in self.units:
            x = unit(x, mode)
        for block in self.blocks:
            x = block(x, mode)
        return x


class DecoderStage(Module):
    def __init__(self, in_ch: int, ch: int, rng: np.random.Generator, norm: bool, upsample: bool, dtype):
        self.upsample = upsample
        self.units = [ConvUnit(in_ch, ch, 3, rng, norm, dtype), ConvUnit(ch, ch, 3, rng, norm, dtype)]

    def forward(self, x: Tensor, skip: Optional[Tensor], mode: str) -> Tensor:
        if self.upsample:
            x = ops.upsample_nearest2(x)
        if skip is not None:
            x = ops.concat_channels(x, skip)
        for unit in self.units:
            x = unit(x, mode)
        return x


class UNetModel(Module):
    def __init__(self, config: UNetConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        dtype = np.dtype(config.dtype)
        enc_norm = config.use_batch_norm and config.norm_scope == "both"
        dec_norm = config.use_batch_norm
        enc = config.encoder_widths
        dec = config.decoder_widths
        bott = config.bottleneck_width

        self.encoder = []
        in_ch = 3
        for k, ch in enumerate(enc):
            self.encoder.append(EncoderStage(config.variant, k, in_ch, ch, rng, enc_norm, config.se_reduction, dtype))
            in_ch = ch
        self.bottleneck = [ConvUnit(in_ch, bott, 3, rng, enc_norm, dtype),
                           ConvUnit(bott, bott, 3, rng, enc_norm, dtype)]
        self.decoder = []
        in_ch = bott
        for j, ch in enumerate(dec):
            skip_ch = enc[3 - j] if j < 4 else 0
            self.decoder.append(DecoderStage(in_ch + skip_ch, ch, rng, dec_norm, upsample=j < 4, dtype=dtype))
            in_ch = ch
        self.head = Conv2d(in_ch, 2, 1, rng, bias=True, dtype=dtype)
        self.name_parameters()

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def _check_input(self, batch: Tensor):
        s = self.config.input_size
        if batch.ndim != 4 or batch.shape[1] != 3 or batch.shape[2:] != (s, s):
            raise UsageError(f"expected a batch of shape Nx3x{s}x{s}, got {batch.shape}")

    def encode(self, batch: Tensor, mode: str = "eval", rng: Optional[np.random.Generator] = None):
        """Return (skips, bottleneck); skips are at scales 1, 1/2, 1/4, 1/8."""
        self._check_input(batch)
        x = batch
        skips = []
        for k, stage in enumerate(self.encoder):
            if k:
                x = ops.maxpool2(x)
            x = stage(x, mode)
            skips.append(x)
        x = ops.maxpool2(x)
        x = self.bottleneck[0](x, mode)
        x = ops.dropout(x, self.config.dropout_rate, rng, mode)
        x = self.bottleneck[1](x, mode)
        return skips, x

    def logits(self, batch: Tensor, mode: str = "eval", rng: Optional[np.random.Generator] = None) -> Tensor:
        if not isinstance(batch, Tensor):
            batch = Tensor(np.asarray(batch, dtype=self.dtype))
        skips, x = self.encode(batch, mode, rng)
        for j, stage in enumerate(self.decoder):
            x = stage(x, skips[3 - j] if j < 4 else None, mode)
        return self.head(x)

    def forward(self, batch: Tensor, mode: str = "eval", rng: Optional[np.random.Generator] = None) -> Tensor:
        """Per-pixel class probabilities, N x 2 x S x S; channel 1 is lesion-positive."""
        return ops.softmax_channels(self.logits(batch, mode, rng))


def build_unet(config: UNetConfig, rng: np.random.Generator | int = 0) -> UNetModel:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return UNetModel(config, rng)


def forward(model: UNetModel, batch: Tensor, mode: str = "eval", rng: Optional[np.random.Generator] = None) -> Tensor:
    return model.forward(batch, mode, rng)
