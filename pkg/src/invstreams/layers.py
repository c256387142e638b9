"""Lifting and group convolutions in the regular representation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, avg_pool2d, conv2d, max_pool2d, reshape, stack, take, tmax
from .groups import GroupSpec, transform_kernel
from .nn import BatchNorm, Module, Parameter


@dataclass
class GroupFeature:
    """Feature map ``[B, C, |G|, H, W]`` carrying a regular representation of ``spec``."""

    tensor: Tensor
    spec: GroupSpec

    def __post_init__(self):
        self.tensor = as_tensor(self.tensor)
        if self.tensor.ndim != 5:
            raise ShapeError(f"group feature must be 5-D [B,C,G,H,W], got {self.tensor.shape}")
        if self.tensor.shape[2] != self.spec.order:
            raise ShapeError(
                f"group axis has length {self.tensor.shape[2]} but the {self.spec.kind} group has order {self.spec.order}"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class GConvLayer(Module):
    """Convolution whose filters are transformed (never duplicated) for every group element.

    ``extent`` is the length of the base kernel's group axis: 1 for a lifting
    layer, |G| for a rotation/flip group convolution, and 1..n_S for the scale
    semigroup (inter-scale support).
    """

    def __init__(
        self,
        c_in: int,
        c_out: int,
        spec: GroupSpec,
        kernel_size: int = 3,
        extent: int = 1,
        stride: int = 1,
        padding: str = "same",
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernel_size}")
        if not 1 <= extent <= spec.order:
            raise ValueError(f"group extent {extent} outside 1..{spec.order}")
        if not spec.is_scale and extent not in (1, spec.order):
            raise ValueError(f"rotation/flip group kernels need extent 1 or {spec.order}, got {extent}")
        rng = rng if rng is not None else np.random.default_rng(0)
        shape = (c_out, c_in, extent, kernel_size, kernel_size)
        self.base_kernels = Parameter(_he_normal(rng, shape, c_in * extent * kernel_size**2))
        self.spec = spec
        self.stride = stride
        self.padding = padding

    @property
    def c_in(self) -> int:
        return self.base_kernels.shape[1]

    @property
    def c_out(self) -> int:
        return self.base_kernels.shape[0]

    @property
    def extent(self) -> int:
        return self.base_kernels.shape[2]

    @property
    def kernel_size(self) -> int:
        return self.base_kernels.shape[-1]

    @property
    def group_slices(self) -> int:
        """Number of feature slices this layer produces per output channel."""
        return self.spec.order

    def forward(self, x):
        if isinstance(x, GroupFeature):
            return group_conv(x, self)
        return lift_conv(x, self)


def joint_group_slices(n_rot: int, n_scale: int) -> int:
    """Group slices of one regular layer over the product of rotations and scales."""
    return n_rot * n_scale


def multi_stream_group_slices(n_rot: int, n_scale: int) -> int:
    """Group slices of two separate streams, one per group."""
    return n_rot + n_scale


def lift_conv(x, layer: GConvLayer) -> GroupFeature:
    """Slice g of the output is conv2d(x, T_g psi) for every element g."""
    x = as_tensor(x)
    if layer.extent != 1:
        raise ShapeError(f"lifting needs a base kernel of group extent 1, got {layer.extent}")
    if x.ndim != 4 or x.shape[1] != layer.c_in:
        raise ShapeError(f"lift_conv expects [B,{layer.c_in},H,W], got {x.shape}")
    spec = layer.spec
    psi = layer.base_kernels[:, :, 0]
    kernels = [transform_kernel(g, psi, spec) for g in spec.elements()]
    if spec.is_scale:
        outs = [conv2d(x, k, layer.stride, layer.padding) for k in kernels]
        return GroupFeature(stack(outs, axis=2), spec)
    big = stack(kernels, axis=1)  # [C_out, G, C_in, k, k]
    c_out, n = layer.c_out, spec.order
    k = layer.kernel_size
    y = conv2d(x, reshape(big, (c_out * n, layer.c_in, k, k)), layer.stride, layer.padding)
    return GroupFeature(reshape(y, (y.shape[0], c_out, n) + y.shape[2:]), spec)


def _check_spec(f: GroupFeature, layer: GConvLayer) -> None:
    if f.spec != layer.spec:
        raise ValueError(f"feature group {f.spec} does not match layer group {layer.spec}")
    if f.shape[1] != layer.c_in:
        raise ShapeError(f"group_conv channel mismatch: feature has {f.shape[1]}, layer expects {layer.c_in}")


def group_conv(f: GroupFeature, layer: GConvLayer) -> GroupFeature:
    """out[u] = sum_g conv2d(f[g], T_u psi[:, :, u^{-1} g]).

    For the scale semigroup u^{-1} g = g - u, and only 0 <= g - u < extent
    contributes; terms with g beyond the last scale are dropped.
    """
    _check_spec(f, layer)
    spec = layer.spec
    t = f.tensor
    b, c_in, n, h, w = t.shape
    c_out = layer.c_out
    psi = layer.base_kernels
    if spec.is_scale:
        outs = []
        for u in range(n):
            width = min(layer.extent, n - u)
            ku = transform_kernel(spec.element(u), psi[:, :, :width], spec)  # [C_out, C_in, width, k', k']
            kk = ku.shape[-1]
            xu = reshape(t[:, :, u:u + width], (b, c_in * width, h, w))
            outs.append(conv2d(xu, reshape(ku, (c_out, c_in * width, kk, kk)), layer.stride, layer.padding))
        return GroupFeature(stack(outs, axis=2), spec)
    if layer.extent != n:
        raise ShapeError(f"group_conv needs a base kernel of group extent {n}, got {layer.extent}")
    per_u = []
    for u in range(n):
        uinv = spec.inverse(spec.element(u))
        idx = [spec.index(spec.compose(uinv, spec.element(g))) for g in range(n)]
        per_u.append(transform_kernel(spec.element(u), take(psi, idx, axis=2), spec))
    k = layer.kernel_size
    big = reshape(stack(per_u, axis=1), (c_out * n, c_in * n, k, k))
    y = conv2d(reshape(t, (b, c_in * n, h, w)), big, layer.stride, layer.padding)
    return GroupFeature(reshape(y, (b, c_out, n) + y.shape[2:]), spec)


def group_max_project(f) -> Tensor:
    """Elementwise max over the group axis: [B,C,G,H,W] -> [B,C,H,W]."""
    t = f.tensor if isinstance(f, GroupFeature) else as_tensor(f)
    return tmax(t, axis=2)


POOL_MODES = ("avg", "max", "mixed")


def spatial_pool(x, mode: str = "avg", window: int = 2) -> Tensor:
    """Collapse the spatial axes of ``[B,C,H,W]`` to ``[B,C]``.

    ``mixed`` averages non-overlapping ``window`` blocks and takes the max over
    the resulting grid.
    """
    x = as_tensor(x)
    if mode == "avg":
        return x.mean(axis=(2, 3))
    if mode == "max":
        return tmax(x, axis=(2, 3))
    if mode == "mixed":
        if x.shape[2] < window or x.shape[3] < window:
            return tmax(x, axis=(2, 3))
        return tmax(avg_pool2d(x, window), axis=(2, 3))
    raise ValueError(f"unknown pooling mode {mode!r}; expected one of {POOL_MODES}")


class GroupMaxProject(Module):
    def forward(self, f):
        return group_max_project(f)


class SpatialPool(Module):
    def __init__(self, mode: str = "avg", window: int = 2):
        super().__init__()
        if mode not in POOL_MODES:
            raise ValueError(f"unknown pooling mode {mode!r}")
        self.mode = mode
        self.window = window

    def forward(self, x):
        return spatial_pool(x, self.mode, self.window)


class GroupBatchNorm(Module):
    """Batch norm for group features; one statistic per channel shared over group and space."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.bn = BatchNorm(channels, momentum, eps)

    def forward(self, f):
        if isinstance(f, GroupFeature):
            return GroupFeature(self.bn(f.tensor), f.spec)
        return self.bn(f)


class GroupReLU(Module):
    def forward(self, f):
        if isinstance(f, GroupFeature):
            return GroupFeature(f.tensor.relu(), f.spec)
        return as_tensor(f).relu()


class GroupMaxPool(Module):
    """Spatial max pooling that keeps the group structure."""

    def __init__(self, size: int = 2):
        super().__init__()
        self.size = size

    def forward(self, f):
        if isinstance(f, GroupFeature):
            return GroupFeature(max_pool2d(f.tensor, self.size), f.spec)
        return max_pool2d(f, self.size)
