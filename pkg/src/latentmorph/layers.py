"""Layer specs, parameter initialization and the Adam optimizer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor

ACTIVATIONS = ("relu", "sigmoid", "none")
KINDS = ("conv3d", "conv3d_transpose", "dense")


@dataclass
class Parameter:
    name: str
    value: Tensor
    adam_m: np.ndarray = field(default=None)
    adam_v: np.ndarray = field(default=None)
    step_count: int = 0

    def __post_init__(self):
        self.value.requires_grad = True
        self.value.name = self.name
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.value.data)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.value.data)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.value.grad


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    n_in: int
    n_out: int
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    activation: str = "none"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if min(self.n_in, self.n_out, self.kernel, self.stride) < 1 or self.pad < 0:
            raise ValueError(f"layer {self.name}: extents must be positive")

    @property
    def weight_shape(self) -> tuple:
        k = self.kernel
        if self.kind == "conv3d":
            return (self.n_out, self.n_in, k, k, k)
        if self.kind == "conv3d_transpose":
            return (self.n_in, self.n_out, k, k, k)
        return (self.n_in, self.n_out)

    @property
    def fan_in(self) -> int:
        k3 = self.kernel**3
        if self.kind == "conv3d":
            return self.n_in * k3
        if self.kind == "conv3d_transpose":
            # each output voxel collects n_in * (k / stride)^3 contributions
            return max(1, self.n_in * k3 // self.stride**3)
        return self.n_in

    def weight_name(self) -> str:
        return f"{self.name}.{'weight' if self.kind == 'dense' else 'kernel'}"


def init_parameters(specs, seed: int) -> list:
    """Kaiming-uniform weights (bound sqrt(6 / fan_in)) and zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    for spec in specs:
        bound = math.sqrt(6.0 / spec.fan_in)
        w = rng.uniform(-bound, bound, size=spec.weight_shape)
        params.append(Parameter(spec.weight_name(), Tensor(w)))
        params.append(Parameter(f"{spec.name}.bias", Tensor(np.zeros(spec.n_out))))
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ValueError("parameter names must be unique")
    return params


def activate(x: Tensor, activation: str) -> Tensor:
    if activation == "relu":
        return T.relu(x)
    if activation == "sigmoid":
        return T.sigmoid(x)
    return x


def apply_layer(spec: LayerSpec, weight: Tensor, bias: Tensor, x: Tensor) -> Tensor:
    if spec.kind == "conv3d":
        y = T.conv3d(x, weight, bias, spec.stride, spec.pad)
    elif spec.kind == "conv3d_transpose":
        y = T.conv3d_transpose(x, weight, bias, spec.stride, spec.pad)
    else:
        y = T.add(T.matmul(x, weight), bias)
    return activate(y, spec.activation)


def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(float(np.sum([np.sum(p.grad**2) for p in params if p.grad is not None])))
    if total > max_norm:
        factor = max_norm / total
        for p in params:
            if p.grad is not None:
                p.value.grad = p.grad * factor
    return total


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; zeroes the gradients afterwards."""
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name} has no gradient")
    for p in params:
        g = p.grad
        p.step_count += 1
        t = p.step_count
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * g * g
        m_hat = p.adam_m / (1.0 - beta1**t)
        v_hat = p.adam_v / (1.0 - beta2**t)
        p.value.data = p.value.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        p.value.grad = None
