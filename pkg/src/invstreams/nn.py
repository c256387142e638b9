"""Module containers and standard layers used to assemble models."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .autodiff import Tensor, avg_pool2d, batch_norm, conv2d, dropout, matmul, max_pool2d, relu
from .groups import upsample_nearest, scale_image


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Base class with parameter/buffer registration and an explicit train flag."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        """Replace a parameter's values (keeps the same Parameter object)."""
        p = self._params[name]
        arr = np.array(value, dtype=np.float64)
        if arr.shape != p.shape:
            raise ValueError(f"parameter {name} expects shape {p.shape}, got {arr.shape}")
        arr.flags.writeable = False
        p.data = arr

    # -- traversal -------------------------------------------------------------
    def children(self) -> Iterator["Module"]:
        return iter(self._modules.values())

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, mod in self._modules.items():
            yield from mod.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, mod in self.named_modules(prefix):
            for pname, p in mod._params.items():
                yield (f"{name}.{pname}" if name else pname), p

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for name, mod in self.named_modules():
            for bname, b in mod._buffers.items():
                yield (f"{name}.{bname}" if name else bname), b

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def set_generator(self, rng: np.random.Generator) -> None:
        for _, mod in self.named_modules():
            if isinstance(mod, Dropout):
                mod.rng = rng

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # -- state -------------------------------------------------------------------
    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = np.array(p.data)
        for name, b in self.named_buffers():
            state[name] = np.array(b)
        return state

    def load_state_dict(self, state: dict, allow_resize: bool = False) -> None:
        """Copy parameters and buffers from ``state``.

        With ``allow_resize`` a stored array whose shape differs replaces the
        parameter outright (used after monomial pruning shrank a layer).
        """
        for name, mod in self.named_modules():
            for bname in list(mod._buffers):
                key = f"{name}.{bname}" if name else bname
                if key not in state:
                    raise KeyError(f"missing buffer {key}")
                arr = np.array(state[key], dtype=np.float64)
                if arr.shape != mod._buffers[bname].shape:
                    if not allow_resize:
                        raise ValueError(f"buffer {key}: shape {arr.shape} != {mod._buffers[bname].shape}")
                    mod.register_buffer(bname, arr)
                else:
                    mod._buffers[bname][...] = arr
            for pname in list(mod._params):
                key = f"{name}.{pname}" if name else pname
                if key not in state:
                    raise KeyError(f"missing parameter {key}")
                p = mod._params[pname]
                arr = np.array(state[key], dtype=np.float64)
                if arr.shape != p.shape:
                    if not allow_resize:
                        raise ValueError(f"parameter {key}: shape {arr.shape} != {p.shape}")
                    setattr(mod, pname, Parameter(arr))
                    continue
                arr.flags.writeable = False
                p.data = arr

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


class Sequential(Module):
    def __init__(self, layers: list[tuple[str, Module]] | None = None):
        super().__init__()
        self.order: list[str] = []
        for name, layer in layers or []:
            self.add(name, layer)

    def add(self, name: str, layer: Module) -> None:
        if name in self._modules:
            raise ValueError(f"duplicate layer name {name!r}")
        setattr(self, name, layer)
        self.order.append(name)

    def layers(self) -> list[tuple[str, Module]]:
        return [(n, self._modules[n]) for n in self.order]

    def forward(self, x):
        for name in self.order:
            x = self._modules[name](x)
        return x


class Linear(Module):
    """y = x @ W + b with W stored as [in, out]."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.has_bias = bias
        if bias:
            self.bias = Parameter(rng.uniform(-bound, bound, size=(n_out,)))

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]

    def forward(self, x):
        y = matmul(x, self.weight)
        return y + self.bias if self.has_bias else y

    def keep_inputs(self, index: np.ndarray) -> None:
        """Drop input rows not listed in ``index`` (used by monomial pruning)."""
        w = np.array(self.weight.data)[index]
        self.weight = Parameter(w)


class Conv2d(Module):
    """Plain convolution without bias (a batch norm usually follows)."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: str = "same"):
        super().__init__()
        fan_in = c_in * kernel_size**2
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, kernel_size, kernel_size)))
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return conv2d(x, self.weight, self.stride, self.padding)


class ReLU(Module):
    def forward(self, x):
        return relu(x)


class Dropout(Module):
    def __init__(self, rate: float):
        super().__init__()
        self.rate = float(rate)
        self.rng: np.random.Generator | None = None

    def forward(self, x):
        return dropout(x, self.rate, self.training, self.rng)


class BatchNorm(Module):
    """Per-channel batch norm over axis 1; group and spatial axes share statistics."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))
        self.momentum = momentum
        self.eps = eps

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def forward(self, x):
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          self.training, self.momentum, self.eps)

    def keep_channels(self, index: np.ndarray) -> None:
        self.gamma = Parameter(np.array(self.gamma.data)[index])
        self.beta = Parameter(np.array(self.beta.data)[index])
        self.register_buffer("running_mean", np.array(self.running_mean)[index])
        self.register_buffer("running_var", np.array(self.running_var)[index])


class MaxPool(Module):
    """Spatial max pooling; works on [B,C,H,W] and group features [B,C,G,H,W]."""

    def __init__(self, size: int = 2):
        super().__init__()
        self.size = size

    def forward(self, x):
        return max_pool2d(x, self.size)


class AvgPool(Module):
    def __init__(self, size: int = 2):
        super().__init__()
        self.size = size

    def forward(self, x):
        return avg_pool2d(x, self.size)


class Upsample(Module):
    """Fixed spatial upsampling (nearest block replication or bilinear zoom)."""

    def __init__(self, factor: int = 2, mode: str = "bilinear"):
        super().__init__()
        if mode not in ("nearest", "bilinear"):
            raise ValueError(f"unknown upsampling mode {mode!r}")
        self.factor = factor
        self.mode = mode

    def forward(self, x):
        if self.mode == "nearest":
            return upsample_nearest(x, self.factor)
        return scale_image(x, float(self.factor))


class Flatten(Module):
    def forward(self, x):
        return x.reshape(x.shape[0], -1)
