"""Signature blocks of the encoder families: residual, inception, squeeze-excitation."""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..autodiff import ops
from ..autodiff.tensor import Tensor
from ..errors import ConfigError
from .layers import BatchNorm2d, Conv2d, ConvUnit, Module


class ResidualBlock(Module):
    """Pre-activation residual block.

    branch   = conv3(ELU(BN(conv3(ELU(BN(x))))))
    shortcut = x, or a 1x1 projection when the channel count changes
    out      = shortcut + branch

    With the last conv zeroed the block is exactly the identity.
    """

    def __init__(self, in_ch: int, channels: int, rng: np.random.Generator,
                 norm: bool = True, dtype=np.float64):
        self.bn1 = BatchNorm2d(in_ch, dtype=dtype) if norm else None
        self.conv1 = Conv2d(in_ch, channels, 3, rng, bias=not norm, dtype=dtype)
        self.bn2 = BatchNorm2d(channels, dtype=dtype) if norm else None
        self.conv2 = Conv2d(channels, channels, 3, rng, bias=True, dtype=dtype)
        self.project: Optional[Conv2d] = (
            Conv2d(in_ch, channels, 1, rng, bias=False, dtype=dtype) if in_ch != channels else None
        )

    def forward(self, x: Tensor, mode: str = "eval") -> Tensor:
        y = x if self.bn1 is None else self.bn1(x, mode)
        y = self.conv1(ops.elu(y))
        if self.bn2 is not None:
            y = self.bn2(y, mode)
        y = self.conv2(ops.elu(y))
        shortcut = x if self.project is None else self.project(x)
        return ops.add(shortcut, y)


class InceptionBlock(Module):
    """Four parallel branches, each producing channels/4 maps.

    1x1 | 1x1 -> 3x3 | 1x1 -> 3x3 -> 3x3 (factorized 5x5) | avgpool3 -> 1x1

    With ``residual=True`` the concatenation goes through a linear 1x1 mix
    and is added to the (projected) input, Inception-ResNet style.
    """

    def __init__(self, in_ch: int, channels: int, rng: np.random.Generator,
                 norm: bool = True, residual: bool = False, dtype=np.float64):
        if channels % 4:
            raise ConfigError(f"inception block needs channels divisible by 4, got {channels}")
        b = channels // 4
        self.b1 = [ConvUnit(in_ch, b, 1, rng, norm, dtype)]
        self.b2 = [ConvUnit(in_ch, b, 1, rng, norm, dtype), ConvUnit(b, b, 3, rng, norm, dtype)]
        self.b3 = [ConvUnit(in_ch, b, 1, rng, norm, dtype), ConvUnit(b, b, 3, rng, norm, dtype),
                   ConvUnit(b, b, 3, rng, norm, dtype)]
        self.b4 = [ConvUnit(in_ch, b, 1, rng, norm, dtype)]
        self.residual = residual
        if residual:
            self.mix = Conv2d(channels, channels, 1, rng, bias=True, dtype=dtype)
            self.project = Conv2d(in_ch, channels, 1, rng, bias=False, dtype=dtype) if in_ch != channels else None

    @property
    def branches(self):
        return [self.b1, self.b2, self.b3, self.b4]

    def forward(self, x: Tensor, mode: str = "eval") -> Tensor:
        outs = []
        for i, branch in enumerate(self.branches):
            y = ops.avgpool3(x) if i == 3 else x
            for unit in branch:
                y = unit(y, mode)
            outs.append(y)
        y = ops.concat_channels(ops.concat_channels(outs[0], outs[1]), ops.concat_channels(outs[2], outs[3]))
        if not self.residual:
            return y
        shortcut = x if self.project is None else self.project(x)
        return ops.add(shortcut, self.mix(y))


class SEBlock(Module):
    """Squeeze-and-excitation: rescale channels by a learned sigmoid gate."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4, dtype=np.float64):
        if channels < reduction:
            raise ConfigError(f"SE block needs channels >= reduction ({channels} < {reduction})")
        hidden = channels // reduction
        self.squeeze = Conv2d(channels, hidden, 1, rng, bias=True, dtype=dtype)
        self.excite = Conv2d(hidden, channels, 1, rng, bias=True, dtype=dtype)

    def gate(self, x: Tensor) -> Tensor:
        return ops.sigmoid(self.excite(ops.elu(self.squeeze(ops.global_avg_pool(x)))))

    def forward(self, x: Tensor, mode: str = "eval") -> Tensor:
        return ops.mul(x, self.gate(x))


def residual_block(x: Tensor, channels: int, rng: np.random.Generator, mode: str = "eval", norm: bool = True) -> Tensor:
    """Functional form: build a fresh block for ``x`` and apply it."""
    return ResidualBlock(x.shape[1], channels, rng, norm, dtype=x.dtype)(x, mode)


def inception_block(x: Tensor, channels: int, rng: np.random.Generator, mode: str = "eval",
                    norm: bool = True, residual: bool = False) -> Tensor:
    return InceptionBlock(x.shape[1], channels, rng, norm, residual, dtype=x.dtype)(x, mode)


def se_block(x: Tensor, rng: np.random.Generator, reduction: int = 4) -> Tensor:
    return SEBlock(x.shape[1], rng, reduction, dtype=x.dtype)(x)
