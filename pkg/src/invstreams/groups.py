"""Discrete rotation, flip and scale groups acting on images, kernels and group features."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from .autodiff import Tensor, apply_linear_map, as_tensor, bilinear_matrix, concat, resample_with, take

KINDS = ("trivial", "rotation", "rotation-flip", "scale")
DEFAULT_SCALE_BASE = 2.0 ** 0.5


class Offset(NamedTuple):
    """Integer pixel displacement (rows, columns)."""

    dy: int
    dx: int


@dataclass(frozen=True)
class GroupElement:
    rot: int = 0
    flip: int = 0
    scale: int = 0


@dataclass(frozen=True)
class GroupSpec:
    """A finite rotation/flip group, a truncated scale semigroup or the trivial group.

    ``exact`` only matters for scales: with integer factors the image action becomes
    nearest-neighbour block replication and kernels are dilated, which makes
    scale equivariance hold exactly.
    """

    kind: str = "trivial"
    n_rot: int = 1
    n_flip: int = 1
    n_scale: int = 1
    scale_base: float = DEFAULT_SCALE_BASE
    exact: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown group kind {self.kind!r}")
        if self.n_rot < 1 or self.n_scale < 1 or self.n_flip not in (1, 2):
            raise ValueError("n_rot and n_scale must be >= 1 and n_flip in {1, 2}")
        if self.kind == "scale" and self.scale_base <= 1.0:
            raise ValueError("scale_base must be > 1")
        if self.kind == "rotation" and self.n_flip != 1:
            raise ValueError("rotation groups have no flips; use kind='rotation-flip'")
        if self.kind == "trivial" and (self.n_rot, self.n_flip, self.n_scale) != (1, 1, 1):
            raise ValueError("the trivial group has a single element")
        if self.kind != "scale" and self.n_scale != 1:
            raise ValueError("n_scale is only meaningful for scale groups")
        if self.kind == "scale" and (self.n_rot, self.n_flip) != (1, 1):
            raise ValueError("scale groups carry no rotations or flips")

    # -- constructors --------------------------------------------------------
    @classmethod
    def trivial(cls) -> "GroupSpec":
        return cls("trivial")

    @classmethod
    def rotation(cls, n_rot: int) -> "GroupSpec":
        return cls("rotation", n_rot=n_rot)

    @classmethod
    def rotation_flip(cls, n_rot: int) -> "GroupSpec":
        return cls("rotation-flip", n_rot=n_rot, n_flip=2)

    @classmethod
    def scale(cls, n_scale: int, base: float = DEFAULT_SCALE_BASE, exact: bool = False) -> "GroupSpec":
        return cls("scale", n_scale=n_scale, scale_base=base, exact=exact)

    @classmethod
    def from_dict(cls, d: dict) -> "GroupSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n_rot": self.n_rot, "n_flip": self.n_flip, "n_scale": self.n_scale,
                "scale_base": self.scale_base, "exact": self.exact}

    # -- structure -------------------------------------------------------------
    @property
    def order(self) -> int:
        if self.kind == "scale":
            return self.n_scale
        return self.n_rot * self.n_flip

    @property
    def is_scale(self) -> bool:
        return self.kind == "scale"

    def angles(self) -> list[float]:
        return [360.0 * r / self.n_rot for r in range(self.n_rot)]

    def factors(self) -> list[float]:
        return [self.scale_base ** i for i in range(self.n_scale)]

    def identity(self) -> GroupElement:
        return GroupElement()

    def elements(self) -> Iterator[GroupElement]:
        for i in range(self.order):
            yield self.element(i)

    def element(self, index: int) -> GroupElement:
        if not 0 <= index < self.order:
            raise IndexError(f"element index {index} outside group of order {self.order}")
        if self.kind == "scale":
            return GroupElement(scale=index)
        return GroupElement(rot=index % self.n_rot, flip=index // self.n_rot)

    def index(self, g: GroupElement) -> int:
        self.validate(g)
        if self.kind == "scale":
            return g.scale
        return g.flip * self.n_rot + g.rot

    def validate(self, g: GroupElement) -> None:
        ok = (0 <= g.rot < self.n_rot and 0 <= g.flip < self.n_flip and 0 <= g.scale < self.n_scale)
        if not ok:
            raise ValueError(f"{g} is not an element of {self}")

    def compose(self, a: GroupElement, b: GroupElement) -> GroupElement:
        """The product a·b (apply b first, then a)."""
        self.validate(a)
        self.validate(b)
        if self.kind == "scale":
            s = a.scale + b.scale
            if s >= self.n_scale:
                raise ValueError(f"scale composition {a.scale}+{b.scale} leaves the truncated semigroup")
            return GroupElement(scale=s)
        sign = -1 if a.flip else 1
        return GroupElement(rot=(a.rot + sign * b.rot) % self.n_rot, flip=a.flip ^ b.flip)

    def inverse(self, g: GroupElement) -> GroupElement:
        self.validate(g)
        if self.kind == "scale":
            if g.scale != 0:
                raise ValueError("scale elements other than the identity have no inverse")
            return g
        if g.flip:
            return g
        return GroupElement(rot=(-g.rot) % self.n_rot)

    def angle(self, g: GroupElement) -> float:
        return 360.0 * g.rot / self.n_rot

    def factor(self, g: GroupElement) -> float:
        return self.scale_base ** g.scale if self.kind == "scale" else 1.0


# -- coordinate maps -----------------------------------------------------------

def _inverse_linear(angle_deg: float, flip: int) -> np.ndarray:
    """Matrix of g^{-1} on (row, col) offsets; rotations turn counter-clockwise on screen."""
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    rot_inv = np.array([[c, s], [-s, c]])
    f = np.diag([1.0, -1.0]) if flip else np.eye(2)
    return f @ rot_inv


def _rigid_coords(hw: tuple[int, int], angle_deg: float, flip: int) -> np.ndarray:
    h, w = hw
    ch, cw = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - ch, np.arange(w) - cw, indexing="ij")
    m = _inverse_linear(angle_deg, flip)
    src_r = m[0, 0] * yy + m[0, 1] * xx + ch
    src_c = m[1, 0] * yy + m[1, 1] * xx + cw
    return np.stack([src_r, src_c], axis=-1)


def _zoom_coords(in_hw: tuple[int, int], out_hw: tuple[int, int], factor: float) -> np.ndarray:
    (h, w), (ho, wo) = in_hw, out_hw
    yy, xx = np.meshgrid(np.arange(ho) - (ho - 1) / 2.0, np.arange(wo) - (wo - 1) / 2.0, indexing="ij")
    return np.stack([yy / factor + (h - 1) / 2.0, xx / factor + (w - 1) / 2.0], axis=-1)


def _block_coords(in_hw: tuple[int, int], factor: int) -> np.ndarray:
    h, w = in_hw
    yy, xx = np.meshgrid(np.arange(h * factor) // factor, np.arange(w * factor) // factor, indexing="ij")
    return np.stack([yy, xx], axis=-1).astype(np.float64)


@functools.lru_cache(maxsize=512)
def _rigid_matrix(hw, angle_deg, flip):
    return bilinear_matrix(_rigid_coords(hw, angle_deg, flip), hw)


@functools.lru_cache(maxsize=512)
def _zoom_matrix(in_hw, out_hw, factor):
    return bilinear_matrix(_zoom_coords(in_hw, out_hw, factor), in_hw)


@functools.lru_cache(maxsize=128)
def _block_matrix(in_hw, factor):
    return bilinear_matrix(_block_coords(in_hw, factor), in_hw)


def _integer_factor(s: float) -> int | None:
    n = round(s)
    return n if n >= 1 and abs(s - n) < 1e-12 else None


def act_image(g: GroupElement, x, spec: GroupSpec, exact: bool | None = None) -> Tensor:
    """Left action L_g x(y) = x(g^{-1} y) on the last two axes of ``x``.

    Rotations and flips resample about the image centre and keep the size.
    A scale by s returns a round(s·H) x round(s·W) image zoomed about the centre;
    with ``exact`` (default: ``spec.exact``) and integer s it is block replication.
    """
    x = as_tensor(x)
    spec.validate(g)
    hw = tuple(x.shape[-2:])
    if spec.kind == "scale":
        return scale_image(x, spec.factor(g), spec.exact if exact is None else exact)
    if g == spec.identity():
        return x
    return resample_with(x, _rigid_matrix(hw, spec.angle(g), g.flip))


def rotate_image(x, angle_deg: float, flip: int = 0) -> Tensor:
    """Rotate (after an optional column flip) about the centre by any angle."""
    x = as_tensor(x)
    return resample_with(x, _rigid_matrix(tuple(x.shape[-2:]), float(angle_deg), int(flip)))


def scale_image(x, factor: float, exact: bool = False) -> Tensor:
    x = as_tensor(x)
    h, w = x.shape[-2:]
    ho, wo = int(round(factor * h)), int(round(factor * w))
    if ho < 1 or wo < 1:
        raise ValueError(f"scale factor {factor} shrinks a {h}x{w} image below one pixel")
    n = _integer_factor(factor)
    if exact and n is not None:
        if n == 1:
            return x
        return resample_with(x, _block_matrix((h, w), n))
    return resample_with(x, _zoom_matrix((h, w), (ho, wo), float(factor)))


def upsample_nearest(x, factor: int) -> Tensor:
    x = as_tensor(x)
    return resample_with(x, _block_matrix(tuple(x.shape[-2:]), int(factor)))


def zoom_on_canvas(x, factor: float) -> Tensor:
    """Zoom by ``factor`` about the centre keeping the canvas size (zero fill, cropping)."""
    x = as_tensor(x)
    hw = tuple(x.shape[-2:])
    if factor == 1.0:
        return x
    return resample_with(x, _zoom_matrix(hw, hw, float(factor)))


# -- kernels -------------------------------------------------------------------

def scaled_kernel_size(k: int, factor: float, exact: bool = False) -> int:
    n = _integer_factor(factor)
    if exact and n is not None:
        return n * (k - 1) + 1
    size = math.ceil(factor * k - 1e-9)
    return size if size % 2 == 1 else size + 1


@functools.lru_cache(maxsize=512)
def kernel_transform_matrix(spec: GroupSpec, g: GroupElement, k: int) -> np.ndarray:
    """Dense matrix mapping a flattened k x k kernel to its transformed version."""
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    spec.validate(g)
    if spec.kind != "scale":
        # splat each tap to its rotated position: a delta stays a delta and mass is kept
        forward = np.linalg.inv(_inverse_linear(spec.angle(g), g.flip))
        r = (k - 1) / 2.0
        yy, xx = np.meshgrid(np.arange(k) - r, np.arange(k) - r, indexing="ij")
        pos = np.stack([forward[0, 0] * yy + forward[0, 1] * xx + r, forward[1, 0] * yy + forward[1, 1] * xx + r], -1)
        return bilinear_matrix(pos, (k, k)).toarray().T
    s = spec.factor(g)
    size = scaled_kernel_size(k, s, spec.exact)
    r_out = (size - 1) // 2
    r_in = (k - 1) // 2
    n = _integer_factor(s)
    if spec.exact and n is not None:
        m = np.zeros((size * size, k * k))
        for i in range(k):
            for j in range(k):
                oi, oj = r_out + n * (i - r_in), r_out + n * (j - r_in)
                m[oi * size + oj, i * k + j] = 1.0
        return m
    # bilinear zoom: tap j spreads over outputs y with weight tent(y/s - j), normalised per tap
    out_pos = (np.arange(size) - r_out) / s
    in_pos = np.arange(k) - r_in
    tent = np.maximum(0.0, 1.0 - np.abs(out_pos[:, None] - in_pos[None, :]))  # [size, k]
    m = np.einsum("ai,bj->abij", tent, tent).reshape(size * size, k * k)
    m /= m.sum(axis=0, keepdims=True)
    return m


def transform_kernel(g: GroupElement, psi, spec: GroupSpec) -> Tensor:
    """Transform the trailing k x k axes of ``psi`` by ``g``.

    Rotations/flips move every tap to its rotated position and split it bilinearly
    over the same grid. Scales resample onto a larger odd support (ceil(s·k))
    preserving the kernel mass, or dilate the kernel when ``spec.exact`` and s is
    an integer.
    """
    psi = as_tensor(psi)
    k = psi.shape[-1]
    if psi.shape[-2] != k:
        raise ValueError(f"kernels must be square, got {psi.shape[-2:]}")
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if g == spec.identity():
        return psi
    m = kernel_transform_matrix(spec, g, k)
    size = int(round(math.sqrt(m.shape[0])))
    return apply_linear_map(psi, m, 2, (size, size))


# -- regular representation ----------------------------------------------------

def permute_group_axis(g: GroupElement, f):
    """Act with ``g`` on a group feature: permute the group axis and transform space.

    For rotation/flip groups slice u of the result is L_g f[g^{-1}u]. For the
    truncated scale semigroup slice u is L_g f[u - idx(g)]; slices below idx(g)
    have no source and are zero.
    """
    spec = f.spec
    t = f.tensor
    spec.validate(g)
    if spec.kind == "scale":
        shift = g.scale
        n = spec.order
        parts = [act_image(g, t[:, :, u - shift:u - shift + 1], spec) for u in range(shift, n)]
        if shift:
            h, w = parts[0].shape[-2:]
            zeros = Tensor(np.zeros(t.shape[:2] + (shift, h, w)))
            parts = [zeros] + parts
        return type(f)(concat(parts, axis=2), spec)
    ginv = spec.inverse(g)
    order = [spec.index(spec.compose(ginv, spec.element(u))) for u in range(spec.order)]
    permuted = take(t, order, axis=2)
    return type(f)(act_image(g, permuted, spec), spec)
