"""Layer primitives and loss functions built on :mod:`lesionforge.ops`."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import ops
from .errors import ContractError, DimensionError
from .tensor import Parameter, Tensor

LAYER_KINDS = (
    "conv", "batchnorm", "relu", "sigmoid", "maxpool", "avgpool_global",
    "dense", "upsample_nearest", "softmax", "bottleneck",
)


@dataclass
class LayerSpec:
    kind: str
    hyper: dict = field(default_factory=dict)
    param_shapes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ContractError(f"unknown layer kind {self.kind!r}")


class Layer:
    kind = "layer"

    def __init__(self, name: str):
        self.name = name

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return self.forward(x, train)

    def own_parameters(self) -> list[Parameter]:
        return []

    def own_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def set_buffer(self, key: str, value: np.ndarray) -> None:
        raise KeyError(key)

    def children(self) -> list["Layer"]:
        return []

    def walk(self) -> Iterator["Layer"]:
        yield self
        for child in self.children():
            yield from child.walk()

    def hyper(self) -> dict:
        return {}

    def spec(self) -> LayerSpec:
        return LayerSpec(self.kind, self.hyper(), {p.name: p.shape for p in self.own_parameters()})

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v}" for k, v in self.hyper().items())
        return f"{type(self).__name__}({self.name!r}{', ' if args else ''}{args})"


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, name, in_channels, filters, kernel_size, stride=1, padding=0, bias=True, dtype=np.float32):
        super().__init__(name)
        self.stride, self.padding = stride, padding
        self.weight = Parameter(np.zeros((filters, in_channels, kernel_size, kernel_size)), f"{name}.weight", dtype)
        self.bias = Parameter(np.zeros(filters), f"{name}.bias", dtype) if bias else None

    def forward(self, x, train=False):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def own_parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def hyper(self):
        f, c, k, _ = self.weight.shape
        return {"filters": f, "in_channels": c, "kernel_size": k, "stride": self.stride, "padding": self.padding}


def batchnorm_forward(x: Tensor, params: dict, mode: str = "train", eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Batch normalization over N,H,W per channel.

    ``params`` holds ``gamma``/``beta`` tensors and ``running_mean``/``running_var``
    arrays; train mode replaces the running arrays in ``params`` with their
    momentum-updated values.
    """
    if eps <= 0:
        raise ContractError("batchnorm eps must be > 0")
    if x.ndim != 4 or x.shape[1] != params["gamma"].shape[0]:
        raise DimensionError(f"batchnorm: input channel axis 1 of {x.shape} != {params['gamma'].shape[0]}")
    if mode == "eval":
        return ops.batch_norm(x, params["gamma"], params["beta"], eps=eps,
                              running_mean=params["running_mean"], running_var=params["running_var"])
    if mode != "train":
        raise ContractError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    out, mu, var = ops.batch_norm(x, params["gamma"], params["beta"], eps=eps)
    dt = params["running_mean"].dtype
    params["running_mean"] = ((1 - momentum) * params["running_mean"] + momentum * mu).astype(dt)
    params["running_var"] = ((1 - momentum) * params["running_var"] + momentum * var).astype(dt)
    return out


class BatchNorm2d(Layer):
    kind = "batchnorm"

    def __init__(self, name, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__(name)
        self.eps, self.momentum = eps, momentum
        self.gamma = Parameter(np.ones(channels), f"{name}.gamma", dtype)
        self.beta = Parameter(np.zeros(channels), f"{name}.beta", dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x, train=False):
        params = {"gamma": self.gamma, "beta": self.beta,
                  "running_mean": self.running_mean, "running_var": self.running_var}
        out = batchnorm_forward(x, params, "train" if train else "eval", self.eps, self.momentum)
        self.running_mean, self.running_var = params["running_mean"], params["running_var"]
        return out

    def own_parameters(self):
        return [self.gamma, self.beta]

    def own_buffers(self):
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}

    def set_buffer(self, key, value):
        if key == f"{self.name}.running_mean":
            self.running_mean = np.array(value, dtype=self.gamma.dtype)
        elif key == f"{self.name}.running_var":
            if np.any(np.asarray(value) <= 0):
                raise ContractError(f"{key}: running variance must be > 0")
            self.running_var = np.array(value, dtype=self.gamma.dtype)
        else:
            raise KeyError(key)

    def hyper(self):
        return {"channels": self.gamma.shape[0], "eps": self.eps, "momentum": self.momentum}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        return ops.relu(x)


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, train=False):
        return ops.sigmoid(x)


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, train=False):
        return ops.softmax(x)


class MaxPool2d(Layer):
    kind = "maxpool"

    def __init__(self, name, size=3, stride=2, padding=1):
        super().__init__(name)
        self.size, self.stride, self.padding = size, stride, padding

    def forward(self, x, train=False):
        return ops.max_pool2d(x, self.size, self.stride, self.padding)

    def hyper(self):
        return {"pool_size": self.size, "stride": self.stride, "padding": self.padding}


class GlobalAvgPool(Layer):
    kind = "avgpool_global"

    def forward(self, x, train=False):
        return ops.global_avg_pool(x)


class Dense(Layer):
    kind = "dense"

    def __init__(self, name, in_features, units, dtype=np.float32):
        super().__init__(name)
        self.weight = Parameter(np.zeros((units, in_features)), f"{name}.weight", dtype)
        self.bias = Parameter(np.zeros(units), f"{name}.bias", dtype)

    def forward(self, x, train=False):
        if x.ndim != 2:
            x = ops.flatten(x)
        return ops.dense(x, self.weight, self.bias)

    def own_parameters(self):
        return [self.weight, self.bias]

    def hyper(self):
        units, d = self.weight.shape
        return {"units": units, "in_features": d}


class UpsampleNearest(Layer):
    kind = "upsample_nearest"

    def __init__(self, name, factor=2):
        super().__init__(name)
        self.factor = factor

    def forward(self, x, train=False):
        return ops.upsample_nearest(x, self.factor)

    def hyper(self):
        return {"factor": self.factor}


def recon_loss(outputs: Sequence[Tensor] | Tensor, inputs: Sequence[Tensor] | Tensor) -> Tensor:
    """Autoencoder error ``E(w) = 1/2 * sum_n ||y_n - x_n||^2`` (no batch averaging).

    Accepts parallel lists of per-sample tensors, or two batched tensors whose
    leading axis indexes samples.
    """
    if isinstance(outputs, Tensor) and isinstance(inputs, Tensor):
        return ops.squared_error(outputs, inputs)
    outputs, inputs = list(outputs), list(inputs)
    if not outputs:
        raise ContractError("recon_loss needs at least one sample")
    if len(outputs) != len(inputs):
        raise ContractError(f"recon_loss: {len(outputs)} outputs vs {len(inputs)} inputs")
    total = None
    for y, x in zip(outputs, inputs):
        term = ops.squared_error(y, x)
        total = term if total is None else ops.add(total, term)
    return total


softmax_cross_entropy = ops.softmax_cross_entropy
