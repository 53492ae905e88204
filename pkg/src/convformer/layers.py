"""Parameter-owning wrappers around the primitives.

Each layer registers its tensors in a shared :class:`ParameterStore` under a
dotted prefix at construction time and is a plain callable afterwards.
Convolutions that feed a batch norm are built without bias: the norm
subtracts any per-channel constant, which would leave that bias with an
identically zero gradient.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import ParameterStore, Tensor


class Linear:
    def __init__(self, store: ParameterStore, name: str, din: int, dout: int, bias: bool = True):
        self.weight = store.add(f"{name}.weight", store.glorot((din, dout), din, dout))
        self.bias = store.add(f"{name}.bias", np.zeros(dout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, dim: int, eps: float = 1e-5):
        self.gamma = store.add(f"{name}.gamma", np.ones(dim))
        self.beta = store.add(f"{name}.beta", np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv2d:
    def __init__(self, store: ParameterStore, name: str, cin: int, cout: int, k: int = 3,
                 stride: int = 1, padding: int | None = None, bias: bool = True):
        self.weight = store.add(f"{name}.weight", store.glorot((cout, cin, k, k), cin * k * k, cout * k * k))
        self.bias = store.add(f"{name}.bias", np.zeros(cout)) if bias else None
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class DWConv2d:
    def __init__(self, store: ParameterStore, name: str, channels: int, k: int = 3, bias: bool = True):
        self.weight = store.add(f"{name}.weight", store.glorot((channels, 1, k, k), k * k, k * k))
        self.bias = store.add(f"{name}.bias", np.zeros(channels)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.dwconv2d(x, self.weight, self.bias)


class TransposeConv2d:
    def __init__(self, store: ParameterStore, name: str, cin: int, cout: int, stride: int = 2,
                 bias: bool = True):
        k = stride
        self.weight = store.add(f"{name}.weight", store.glorot((cin, cout, k, k), cin * k * k, cout * k * k))
        self.bias = store.add(f"{name}.bias", np.zeros(cout)) if bias else None
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ops.transpose_conv2d(x, self.weight, self.bias, self.stride)


class BatchNorm2d:
    def __init__(self, store: ParameterStore, name: str, channels: int, momentum: float = 0.1,
                 eps: float = 1e-5):
        self.store = store
        self.gamma = store.add(f"{name}.gamma", np.ones(channels))
        self.beta = store.add(f"{name}.beta", np.zeros(channels))
        # running statistics start at mean 0 / variance 1 so eval mode is defined before training
        self.running_mean = store.add_buffer(f"{name}.running_mean", np.zeros(channels))
        self.running_var = store.add_buffer(f"{name}.running_var", np.ones(channels))
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              training=self.store.training, momentum=self.momentum, eps=self.eps)


class ConvBNReLU:
    """3x3 (or strided) convolution, batch norm, ReLU."""

    def __init__(self, store: ParameterStore, name: str, cin: int, cout: int, stride: int = 1):
        self.conv = Conv2d(store, f"{name}.conv", cin, cout, 3, stride=stride, bias=False)
        self.bn = BatchNorm2d(store, f"{name}.bn", cout)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.conv(x)))
