"""Parameter-holding layers and a tiny module tree for naming/iteration."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from ..autodiff import ops
from ..autodiff.tensor import Parameter, Tensor


class Module:
    """Base class: walks attributes in definition order to find parameters.

    Attributes that are Modules, lists of Modules, or Parameters are part of
    the tree; everything else is ignored.
    """

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Module, Parameter)):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            else:
                yield from value.named_parameters(name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, "BatchNorm2d", str]]:
        """Yield (name, owner, attribute) for every running-statistics array."""
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")
        if isinstance(self, BatchNorm2d):
            yield f"{prefix}running_mean", self, "mean"
            yield f"{prefix}running_var", self, "var"

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def name_parameters(self):
        for name, p in self.named_parameters():
            p.name = name

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_uniform(shape: tuple, fan_in: int, rng: np.random.Generator, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float64):
        self.weight = Parameter(he_uniform((out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel, rng, dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype)) if bias else None
        self.padding = kernel // 2

    def forward(self, x: Tensor, mode: str = "eval") -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float64):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.stats = ops.RunningStats(channels, dtype=dtype)

    def forward(self, x: Tensor, mode: str = "eval") -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.stats, mode=mode)


class ConvUnit(Module):
    """conv -> [batch norm] -> ELU. The conv drops its bias when BN follows."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 norm: bool = True, dtype=np.float64):
        self.conv = Conv2d(in_ch, out_ch, kernel, rng, bias=not norm, dtype=dtype)
        self.bn: Optional[BatchNorm2d] = BatchNorm2d(out_ch, dtype=dtype) if norm else None

    def forward(self, x: Tensor, mode: str = "eval") -> Tensor:
        y = self.conv(x)
        if self.bn is not None:
            y = self.bn(y, mode)
        return ops.elu(y)
