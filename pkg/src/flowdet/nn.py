"""Parameter containers and the handful of layers the detector is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    """Holds parameters (requires_grad tensors) and child modules as attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype, gain: float = 1.0) -> Tensor:
    """U(-b, b) with b = gain * sqrt(3 / fan_in), i.e. variance gain^2 / fan_in."""
    bound = gain * np.sqrt(3.0 / max(fan_in, 1))
    return param(rng.uniform(-bound, bound, size=shape), dtype)


def xavier_init(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return param(rng.uniform(-bound, bound, size=shape), dtype)


def zeros(shape, dtype) -> Tensor:
    return param(np.zeros(shape), dtype)


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int = 1, stride: int = 1, bias: bool = True,
                 dtype=np.float32, zero: bool = False):
        fan_in = c_in * k * k
        shape = (c_out, c_in, k, k)
        # variance 2 / fan_in keeps activations from shrinking through the SiLU stack
        self.weight = zeros(shape, dtype) if zero else uniform_init(rng, shape, fan_in, dtype, np.sqrt(2.0))
        self.bias = zeros((c_out,), dtype) if bias else None
        self.stride = stride
        self.pad = k // 2

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class Linear(Module):
    """y = x W + b on the last axis."""

    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True, dtype=np.float32, zero: bool = False):
        self.weight = zeros((d_in, d_out), dtype) if zero else xavier_init(rng, (d_in, d_out), d_in, d_out, dtype)
        self.bias = zeros((d_out,), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return ops.add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, axis: int = -1, dtype=np.float32):
        self.gamma = param(np.ones(dim), dtype)
        self.beta = zeros((dim,), dtype)
        self.axis = axis

    def forward(self, x: Tensor) -> Tensor:
        return ops.layernorm(x, self.gamma, self.beta, axis=self.axis)


class FeedForward(Module):
    def __init__(self, rng, dim: int, hidden: int, dtype=np.float32):
        self.fc1 = Linear(rng, dim, hidden, dtype=dtype)
        self.fc2 = Linear(rng, hidden, dim, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.silu(self.fc1(x)))
