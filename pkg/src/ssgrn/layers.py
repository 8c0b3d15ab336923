"""Parameterized layers built on the tensor ops.

Weights use fan-in-scaled uniform init (bound sqrt(6/fan_in)), biases start
at zero; everything is deterministic given the generator passed in. Each
layer yields (name, tensor, decay) triples so the trainer can exclude
normalization affines and biases from weight decay.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def norm_groups(channels: int, preferred: int = 8) -> int:
    """Group count for group norm: 8 when divisible, else largest divisor <= 8."""
    for g in range(min(preferred, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


class Conv2d:
    def __init__(
        self,
        rng: np.random.Generator,
        in_channels: int,
        out_channels: int,
        kernel: int,
        stride: int = 1,
        padding: int = 0,
        dilation: int = 1,
        bias: bool = True,
        dtype=np.float32,
    ):
        fan_in = in_channels * kernel * kernel
        self.weight = fan_in_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype)
        self.bias = zeros_param((out_channels,), dtype) if bias else None
        self.stride = stride
        self.padding = padding
        self.dilation = dilation

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)

    def named_params(self):
        yield "weight", self.weight, True
        if self.bias is not None:
            yield "bias", self.bias, False


class Linear:
    """y = x @ W + b with W of shape (in_features, out_features)."""

    def __init__(self, rng, in_features: int, out_features: int, bias: bool = True, dtype=np.float32):
        self.weight = fan_in_uniform(rng, (in_features, out_features), in_features, dtype)
        self.bias = zeros_param((out_features,), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out

    def named_params(self):
        yield "weight", self.weight, True
        if self.bias is not None:
            yield "bias", self.bias, False


class GroupNorm:
    def __init__(self, channels: int, groups: int | None = None, eps: float = 1e-5, dtype=np.float32):
        self.groups = norm_groups(channels) if groups is None else groups
        self.eps = eps
        self.gamma = ones_param((channels,), dtype)
        self.beta = zeros_param((channels,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.gamma, self.beta, self.groups, self.eps)

    def named_params(self):
        yield "gamma", self.gamma, False
        yield "beta", self.beta, False


class ConvBlock:
    """conv -> group norm -> relu, extent-preserving (padding = kernel // 2)."""

    def __init__(self, rng, in_channels: int, out_channels: int, kernel: int = 3, dtype=np.float32):
        self.conv = Conv2d(rng, in_channels, out_channels, kernel, padding=kernel // 2, dtype=dtype)
        self.norm = GroupNorm(out_channels, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.norm(self.conv(x)))

    def named_params(self):
        for name, p, decay in self.conv.named_params():
            yield f"conv.{name}", p, decay
        for name, p, decay in self.norm.named_params():
            yield f"norm.{name}", p, decay
