"""Parameterized building blocks used by the feature and regularizer nets.

Each layer registers its tensors in a :class:`~sweepstereo.params.ParameterStore`
under a dotted name prefix, so checkpoints are flat name -> tensor maps.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .params import ParameterStore
from .tensor import Tensor

__all__ = ["Conv2dLayer", "GroupNormLayer", "ResidualBlock", "ConvGnRelu"]


class Conv2dLayer:
    """Same-padding convolution (odd kernel); He-normal weight init."""

    def __init__(self, store: ParameterStore, name: str, c_in: int, c_out: int,
                 rng: np.random.Generator, k: int = 3, stride: int = 1,
                 dilation: int = 1, bias: bool = True, gain: float = 1.0):
        std = gain * np.sqrt(2.0 / (c_in * k * k))
        self.weight = store.create(f"{name}.weight", rng.normal(0.0, std, size=(c_out, c_in, k, k)))
        self.bias = store.create(f"{name}.bias", np.zeros(c_out)) if bias else None
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (k - 1) // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride,
                          dilation=self.dilation, padding=self.padding)


class GroupNormLayer:
    def __init__(self, store: ParameterStore, name: str, channels: int,
                 groups: int = 4, eps: float = 1e-5):
        if channels % groups != 0:
            raise ValueError(f"{channels} channels not divisible by {groups} groups")
        self.gamma = store.create(f"{name}.gamma", np.ones(channels))
        self.beta = store.create(f"{name}.beta", np.zeros(channels))
        self.groups = groups
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self.groups, self.gamma, self.beta, eps=self.eps)


class ConvGnRelu:
    """conv -> group norm -> relu, the repeated unit of the feature stack."""

    def __init__(self, store, name, c_in, c_out, rng, k=3, dilation=1, stride=1, groups=4):
        self.conv = Conv2dLayer(store, f"{name}.conv", c_in, c_out, rng, k=k,
                                stride=stride, dilation=dilation)
        self.gn = GroupNormLayer(store, f"{name}.gn", c_out, groups=groups)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.relu(self.gn(self.conv(x)))


class ResidualBlock:
    """Two conv+GN stages with an identity skip: relu(x + f(x))."""

    def __init__(self, store, name, channels, rng, k=3, groups=4):
        self.conv1 = Conv2dLayer(store, f"{name}.conv1", channels, channels, rng, k=k)
        self.gn1 = GroupNormLayer(store, f"{name}.gn1", channels, groups=groups)
        self.conv2 = Conv2dLayer(store, f"{name}.conv2", channels, channels, rng, k=k)
        self.gn2 = GroupNormLayer(store, f"{name}.gn2", channels, groups=groups)

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.relu(self.gn1(self.conv1(x)))
        y = self.gn2(self.conv2(y))
        return ops.relu(x + y)
