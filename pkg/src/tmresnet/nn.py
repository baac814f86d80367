"""Parameter-holding layers on top of :mod:`tmresnet.autodiff`."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


class Module:
    """Registers Parameters, buffers and sub-modules in attribute-assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module"):
        self._modules[name] = module
        object.__setattr__(self, name, module)

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, mod in self._modules.items():
            yield from mod.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for mod_path, mod in self.named_modules(prefix):
            for name, p in mod._params.items():
                yield (f"{mod_path}.{name}" if mod_path else name), p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for mod_path, mod in self.named_modules(prefix):
            for name in mod._buffers:
                yield (f"{mod_path}.{name}" if mod_path else name), mod, name

    def train(self, mode: bool = True):
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def to(self, dtype):
        """Cast parameters and buffers in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        for _, mod, name in self.named_buffers():
            value = getattr(mod, name).astype(dtype)
            mod._buffers[name] = value
            object.__setattr__(mod, name, value)
        return self

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.dtype(np.float32)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for path, p in self.named_parameters():
            out[path] = p.data
        for path, mod, name in self.named_buffers():
            out[path] = getattr(mod, name)
        return out

    def load_state_dict(self, state):
        for path, p in self.named_parameters():
            p.data = np.array(state[path], dtype=p.dtype).reshape(p.shape)
            p.grad = np.zeros_like(p.data)
        for path, mod, name in self.named_buffers():
            cur = getattr(mod, name)
            value = np.array(state[path], dtype=cur.dtype).reshape(cur.shape)
            mod._buffers[name] = value
            object.__setattr__(mod, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1, padding=None):
        super().__init__()
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.weight = Parameter(
            np.zeros((out_channels, in_channels, kernel_size, kernel_size), dtype=np.float32), kind="conv"
        )

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = Parameter(np.ones(channels, dtype=np.float32), kind="bn_gamma")
        self.bias = Parameter(np.zeros(channels, dtype=np.float32), kind="bn_beta")
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ad.batch_norm(
            x, self.weight, self.bias, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )


class Linear(Module):
    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.weight = Parameter(np.zeros((out_features, in_features), dtype=np.float32), kind="linear")
        self.bias = Parameter(np.zeros(out_features, dtype=np.float32), kind="bias")

    def forward(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


def init_parameters(module: Module, seed: int) -> None:
    """Kaiming fan-in normal for conv/linear weights, gamma=1, beta=0, zero biases."""
    rng = np.random.default_rng(seed)
    for _, p in module.named_parameters():
        if p.kind in ("conv", "linear"):
            fan_in = int(np.prod(p.shape[1:]))
            p.data = (rng.standard_normal(p.shape) * np.sqrt(2.0 / fan_in)).astype(p.dtype)
        elif p.kind == "bn_gamma":
            p.data = np.ones(p.shape, dtype=p.dtype)
        else:
            p.data = np.zeros(p.shape, dtype=p.dtype)
        p.grad = np.zeros_like(p.data)
