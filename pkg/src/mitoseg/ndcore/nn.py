"""Parameter containers built on the functional operators."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import conv as C
from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal module: parameters and child modules are discovered from attributes.

    Attribute order is insertion order, so parameter names are deterministic.
    """

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, np.ndarray):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to(self, dtype) -> "Module":
        """Cast parameters and buffers in place (float64 is used for gradient checks)."""
        for m in self.modules():
            for name, value in list(vars(m).items()):
                if isinstance(value, Tensor):
                    value.data = value.data.astype(dtype)
                    value.grad = None
                elif isinstance(value, np.ndarray) and value.dtype.kind == "f":
                    setattr(m, name, value.astype(dtype))
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    std = np.sqrt(2.0 / max(fan_in, 1))
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1,
                 padding: int | None = None, bias: bool = True, rng=None):
        rng = rng or np.random.default_rng(0)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = he_init(rng, (c_out, c_in, k, k), c_in * k * k)
        self.bias = zeros_param((c_out,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return C.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class DepthwiseSeparableConv(Module):
    """3×3 depthwise + 1×1 pointwise. Bias only on the pointwise stage, when requested."""

    def __init__(self, c_in: int, c_out: int, stride: int = 1, bias: bool = True, rng=None):
        rng = rng or np.random.default_rng(0)
        self.stride = stride
        self.dw_weight = he_init(rng, (c_in, 1, 3, 3), 9)
        self.pw_weight = he_init(rng, (c_out, c_in, 1, 1), c_in)
        self.pw_bias = zeros_param((c_out,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return C.depthwise_separable_conv(x, self.dw_weight, self.pw_weight,
                                          stride=self.stride, pw_bias=self.pw_bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = zeros_param((channels,))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             training=self.training, momentum=self.momentum, eps=self.eps)


class Identity(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x


class Linear(Module):
    def __init__(self, f_in: int, f_out: int, bias: bool = True, rng=None):
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(f_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(f_out, f_in)), requires_grad=True)
        self.bias = zeros_param((f_out,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


def norm_or_identity(channels: int, enabled: bool) -> Module:
    return BatchNorm2d(channels) if enabled else Identity()


def parameter_manifest(model: Module) -> dict:
    """Per-parameter (name, shape, count) rows plus the total."""
    rows = [(name, tuple(p.shape), int(np.prod(p.shape))) for name, p in model.named_parameters()]
    return {"layers": rows, "total": sum(r[2] for r in rows)}
