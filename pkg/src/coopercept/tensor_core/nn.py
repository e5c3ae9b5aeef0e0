"""Parameters, a small module tree, and the layers the detector is built from."""
from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, linear, get_default_dtype


class Parameter(Tensor):
    __slots__ = ("init", "fan_in")

    def __init__(self, shape, init: str = "kaiming", fan_in: int | None = None):
        super().__init__(np.zeros(shape, dtype=get_default_dtype()), requires_grad=True)
        self.init = init
        self.fan_in = fan_in if fan_in is not None else int(np.prod(shape[1:])) if len(shape) > 1 else 1
        if init in ("zeros", "ones") or init.startswith("const:"):
            init_parameter(self, "", 0)


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Independent RNG stream per (seed, parameter name)."""
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def init_parameter(p: Parameter, name: str, seed: int) -> None:
    if p.init == "zeros":
        p.data[...] = 0
    elif p.init == "ones":
        p.data[...] = 1
    elif p.init == "kaiming":
        bound = np.sqrt(6.0 / p.fan_in)
        p.data[...] = param_rng(seed, name).uniform(-bound, bound, p.shape)
    elif p.init.startswith("normal:"):
        std = float(p.init.split(":", 1)[1])
        p.data[...] = param_rng(seed, name).normal(0.0, std, p.shape)
    elif p.init.startswith("const:"):
        p.data[...] = float(p.init.split(":", 1)[1])
    else:
        raise ValueError(f"unknown init {p.init!r} for {name}")


class Module:
    training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, val in vars(self).items():
            if isinstance(val, F.RunningStats):
                yield f"{prefix}{key}.mean", val.mean
                yield f"{prefix}{key}.var", val.var
        for key, child in self.children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def initialize(self, seed: int, prefix: str = "") -> "Module":
        for name, p in self.named_parameters(prefix):
            init_parameter(p, name, seed)
        return self

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters(prefix)}
        out.update(self.named_buffers(prefix))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        targets = {name: p.data for name, p in self.named_parameters(prefix)}
        targets.update(self.named_buffers(prefix))
        missing = sorted(set(targets) - set(state))
        if missing:
            raise KeyError(f"state is missing entries: {missing[:5]}")
        for name, arr in targets.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ValueError(f"{name}: shape {src.shape} does not match {arr.shape}")
            arr[...] = src

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0, bias: bool = True):
        self.weight = Parameter((cout, cin, k, k))
        self.bias = Parameter((cout,), init="zeros") if bias else None
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int, bias: bool = True):
        self.weight = Parameter((cin, cout, k, k), fan_in=cin * k * k)
        self.bias = Parameter((cout,), init="zeros") if bias else None
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Parameter((channels,), init="ones")
        self.beta = Parameter((channels,), init="zeros")
        self.stats = F.RunningStats(channels, momentum, get_default_dtype())
        self.eps = eps

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta, self.stats, self.training, self.eps, mask)


class Linear(Module):
    def __init__(self, fin: int, fout: int, bias: bool = True):
        self.weight = Parameter((fout, fin))
        self.bias = Parameter((fout,), init="zeros") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)
