"""Invariant integration layers for rotations, flips and scales, plus monomial pruning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, clamp_min, concat, conv2d, depthwise_conv2d, reshape, stack
from .groups import GroupSpec, Offset, _inverse_linear, transform_kernel
from .nn import BatchNorm, Linear, Module, Parameter

DEFAULT_EPS = 1e-6
DEFAULT_SCHEDULE = ((0, 25), (5, 12), (10, 5))


@dataclass(frozen=True)
class MonomialSpec:
    """m(x) = prod_i x(t - d_i)^{b_i} over a local neighbourhood."""

    offsets: tuple[Offset, ...]
    exponents: tuple[float, ...]

    def __post_init__(self):
        offsets = tuple(Offset(int(o[0]), int(o[1])) for o in self.offsets)
        exponents = tuple(float(b) for b in self.exponents)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "exponents", exponents)
        if len(offsets) < 1:
            raise ValueError("a monomial needs at least one factor")
        if len(offsets) != len(exponents):
            raise ValueError(f"{len(offsets)} offsets but {len(exponents)} exponents")
        if any(b < 0 or not math.isfinite(b) for b in exponents):
            raise ValueError(f"exponents must be finite and >= 0, got {exponents}")

    @property
    def arity(self) -> int:
        return len(self.offsets)

    @property
    def order(self) -> float:
        return float(sum(self.exponents))

    def check_order(self, group_order: int) -> None:
        if self.order > group_order + 1e-12:
            raise ValueError(f"monomial order {self.order} exceeds the group order {group_order}")

    def scaled(self, factor: float) -> "MonomialSpec":
        return MonomialSpec(self.offsets, tuple(b * factor for b in self.exponents))

    def to_dict(self) -> dict:
        return {"offsets": [list(o) for o in self.offsets], "exponents": list(self.exponents)}

    @classmethod
    def from_dict(cls, d: dict) -> "MonomialSpec":
        return cls(tuple(tuple(o) for o in d["offsets"]), tuple(d["exponents"]))


@dataclass(frozen=True)
class MonomialPair:
    """Dividend/divisor monomials of a scale-invariant quotient."""

    dividend: MonomialSpec
    divisor: MonomialSpec

    def __post_init__(self):
        if self.divisor.order <= 0:
            raise ValueError("divisor monomial must have positive order")

    @property
    def normalized_divisor(self) -> MonomialSpec:
        """Divisor with exponents rescaled so both monomials have the same order."""
        return self.divisor.scaled(self.dividend.order / self.divisor.order)

    def to_dict(self) -> dict:
        return {"dividend": self.dividend.to_dict(), "divisor": self.divisor.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "MonomialPair":
        return cls(MonomialSpec.from_dict(d["dividend"]), MonomialSpec.from_dict(d["divisor"]))


@dataclass
class IIConfig:
    kernel_size: int = 3
    n_rot: int = 4
    n_flip: int = 1
    eps: float = DEFAULT_EPS
    schedule: tuple[tuple[int, int], ...] = DEFAULT_SCHEDULE
    padding: str = "same"

    def __post_init__(self):
        if self.kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {self.kernel_size}")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if self.n_flip not in (1, 2):
            raise ValueError("n_flip must be 1 or 2")
        self.schedule = tuple((int(e), int(n)) for e, n in self.schedule)


# -- sampling ------------------------------------------------------------------

def rotate_offset(offset, angle_deg: float) -> np.ndarray:
    """Rotate a (row, col) displacement the same way images are rotated by the group action."""
    forward = np.linalg.inv(_inverse_linear(angle_deg, 0))
    v = forward @ np.asarray(offset, dtype=np.float64)
    return np.where(np.abs(v - np.round(v)) < 1e-9, np.round(v), v)


def _shift_kernel(d: np.ndarray) -> np.ndarray:
    """Kernel whose correlation reads x at t - d with bilinear weights."""
    p = -np.asarray(d, dtype=np.float64)
    r = int(max(math.ceil(abs(p[0])), math.ceil(abs(p[1]))))
    size = 2 * r + 1
    q = np.arange(size) - r
    wr = np.maximum(0.0, 1.0 - np.abs(p[0] - q))
    wc = np.maximum(0.0, 1.0 - np.abs(p[1] - q))
    return np.outer(wr, wc)


def shift_image(x, d, padding: str = "same") -> Tensor:
    """y(t) = x(t - d) for a real displacement ``d``; zero (or periodic) outside the grid."""
    x = as_tensor(x)
    d = np.asarray(d, dtype=np.float64)
    if not d.any():
        return x
    b, c, h, w = x.shape
    k = _shift_kernel(d)
    y = conv2d(reshape(x, (b * c, 1, h, w)), Tensor(k[None, None]), 1, padding)
    return reshape(y, (b, c, h, w))


def relu_floor(x, eps: float = DEFAULT_EPS) -> Tensor:
    """max(relu(x), eps): keeps II inputs strictly positive."""
    return clamp_min(as_tensor(x), eps)


def _require_positive(x: Tensor, what: str) -> None:
    if not np.all(x.data > 0):
        raise ValueError(f"{what} needs strictly positive input; apply relu_floor first")


def _monomial_map(x: Tensor, offsets: Sequence, exponents: Sequence[float], eps: float, padding: str) -> Tensor:
    """prod_i max(x(t - d_i), eps)^{b_i} at every position t."""
    out = None
    for d, b in zip(offsets, exponents):
        if b == 0:
            continue
        term = clamp_min(shift_image(x, d, padding), eps) ** b
        out = term if out is None else out * term
    if out is None:
        return Tensor(np.ones(x.shape))
    return out


# -- the five II variants ----------------------------------------------------------

def ii_rotation_monomial(x, m: MonomialSpec, n_rot: int, eps: float = DEFAULT_EPS, padding: str = "same") -> Tensor:
    """Average of a local monomial over all positions and N rotated neighbourhoods.

    Rotated offsets are real-valued and sampled bilinearly; sampled values are
    floored at ``eps`` so reads outside the image stay differentiable.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"expected [B,C,H,W], got {x.shape}")
    _require_positive(x, "rotation monomial II")
    maps = []
    for r in range(n_rot):
        offsets = [rotate_offset(d, 360.0 * r / n_rot) for d in m.offsets]
        maps.append(_monomial_map(x, offsets, m.exponents, eps, padding).mean(axis=(2, 3)))
    return stack(maps, axis=0).mean(axis=0)


def orbit_kernel(psi, spec: GroupSpec) -> Tensor:
    """(1/|G|) sum_g T_g psi, the group-averaged kernel."""
    ks = [transform_kernel(g, psi, spec) for g in spec.elements()]
    return stack(ks, axis=0).mean(axis=0)


def _ws_average(x, psi, spec: GroupSpec, padding: str) -> Tensor:
    x, psi = as_tensor(x), as_tensor(psi)
    if x.ndim != 4:
        raise ShapeError(f"expected [B,C,H,W], got {x.shape}")
    if psi.ndim != 3 or psi.shape[0] != x.shape[1]:
        raise ShapeError(f"WS kernel must be [{x.shape[1]}, k, k], got {psi.shape}")
    # correlation is linear in the kernel, so averaging kernels equals averaging responses
    return depthwise_conv2d(x, orbit_kernel(psi, spec), padding).mean(axis=(2, 3))


def ii_ws_rotation(x, psi, n_rot: int, padding: str = "same") -> Tensor:
    """Weighted-sum II: mean over rotations and positions of x correlated with rotated psi."""
    return _ws_average(x, psi, GroupSpec.rotation(n_rot), padding)


def ii_ws_e2(x, psi, n_rot: int, n_flip: int = 2, padding: str = "same") -> Tensor:
    """Weighted-sum II over rotations and flips."""
    spec = GroupSpec.rotation_flip(n_rot) if n_flip == 2 else GroupSpec.rotation(n_rot)
    return _ws_average(x, psi, spec, padding)


def ii_scale_monomial(x, pair: MonomialPair, eps: float = DEFAULT_EPS, padding: str = "same") -> Tensor:
    """sum_t dividend(t) / sum_t divisor(t) with the divisor normalised to the same order."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"expected [B,C,H,W], got {x.shape}")
    _require_positive(x, "scale monomial II")
    div = pair.normalized_divisor
    num = _monomial_map(x, pair.dividend.offsets, pair.dividend.exponents, eps, padding).sum(axis=(2, 3))
    den = _monomial_map(x, div.offsets, div.exponents, eps, padding).sum(axis=(2, 3))
    if np.any(den.data < 1e-30):
        raise ValueError("scale monomial II divisor is numerically zero")
    return num / den


def ii_scale_ws(x, psi, padding: str = "same") -> Tensor:
    """Spatial mean of conv2d(x, psi) divided by the mean of x over channels and space."""
    x, psi = as_tensor(x), as_tensor(psi)
    if x.ndim != 4:
        raise ShapeError(f"expected [B,C,H,W], got {x.shape}")
    num = conv2d(x, psi, 1, padding).mean(axis=(2, 3))
    den = x.mean(axis=(1, 2, 3), keepdims=True).reshape(x.shape[0], 1)
    if np.any(den.data <= 0):
        raise ValueError("scale WS II divisor must be positive")
    return num / den


# -- layers ------------------------------------------------------------------------

class RotationMonomialII(Module):
    """One feature block of C channels per monomial, ordered monomial-major."""

    def __init__(self, channels: int, monomials: Sequence[MonomialSpec], n_rot: int,
                 eps: float = DEFAULT_EPS, padding: str = "same", group_order: int | None = None):
        super().__init__()
        self.channels = channels
        self.terms = list(monomials)
        self.n_rot = n_rot
        self.eps = eps
        self.padding = padding
        for m in self.terms:
            m.check_order(group_order if group_order is not None else n_rot)

    @property
    def n_features(self) -> int:
        return self.channels * len(self.terms)

    def forward(self, x):
        x = relu_floor(x, self.eps)
        return concat([ii_rotation_monomial(x, m, self.n_rot, self.eps, self.padding) for m in self.terms], axis=1)


class ScaleMonomialII(Module):
    def __init__(self, channels: int, pairs: Sequence[MonomialPair], eps: float = DEFAULT_EPS,
                 padding: str = "same", group_order: int | None = None):
        super().__init__()
        self.channels = channels
        self.terms = list(pairs)
        self.eps = eps
        self.padding = padding
        if group_order is not None:
            for p in self.terms:
                p.dividend.check_order(group_order)

    @property
    def n_features(self) -> int:
        return self.channels * len(self.terms)

    def forward(self, x):
        x = relu_floor(x, self.eps)
        return concat([ii_scale_monomial(x, p, self.eps, self.padding) for p in self.terms], axis=1)


class WSRotationII(Module):
    """Learnable per-channel kernel averaged over rotations (and flips when n_flip=2)."""

    def __init__(self, channels: int, kernel_size: int = 3, n_rot: int = 4, n_flip: int = 1,
                 padding: str = "same", rng: np.random.Generator | None = None):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernel_size}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.psi = Parameter(rng.normal(0.0, 1.0 / kernel_size, size=(channels, kernel_size, kernel_size)))
        self.n_rot = n_rot
        self.n_flip = n_flip
        self.padding = padding

    @property
    def n_features(self) -> int:
        return self.psi.shape[0]

    def forward(self, x):
        return ii_ws_e2(x, self.psi, self.n_rot, self.n_flip, self.padding)


class ScaleWSII(Module):
    def __init__(self, c_in: int, c_out: int, kernel_size: int = 3, eps: float = DEFAULT_EPS,
                 padding: str = "same", rng: np.random.Generator | None = None):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernel_size}")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = c_in * kernel_size**2
        self.psi = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, kernel_size, kernel_size)))
        self.eps = eps
        self.padding = padding

    @property
    def n_features(self) -> int:
        return self.psi.shape[0]

    def forward(self, x):
        return ii_scale_ws(relu_floor(x, self.eps), self.psi, self.padding)


# -- monomial selection ------------------------------------------------------------

def random_monomial(rng: np.random.Generator, arity: int = 2, radius: int = 2,
                    exponent_range: tuple[float, float] = (0.5, 2.0), max_order: float | None = None) -> MonomialSpec:
    """Offsets uniform over the disc of ``radius``, exponents uniform in ``exponent_range``."""
    disc = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)
            if dy * dy + dx * dx <= radius * radius]
    lo, hi = exponent_range
    if max_order is not None and arity * lo > max_order:
        raise ValueError(f"no monomial of arity {arity} with exponents >= {lo} fits order {max_order}")
    for _ in range(10000):
        idx = rng.choice(len(disc), size=arity, replace=False)
        exps = rng.uniform(lo, hi, size=arity)
        if max_order is None or exps.sum() <= max_order:
            return MonomialSpec(tuple(disc[i] for i in idx), tuple(exps))
    raise RuntimeError("could not draw a monomial within the order limit")


def random_monomial_pairs(n: int, rng: np.random.Generator, arity: int = 2, radius: int = 2,
                          exponent_range: tuple[float, float] = (0.5, 2.0),
                          max_order: float | None = None) -> list[MonomialPair]:
    return [MonomialPair(random_monomial(rng, arity, radius, exponent_range, max_order),
                         random_monomial(rng, arity, radius, exponent_range, max_order)) for _ in range(n)]


def l1_score(block: np.ndarray) -> float:
    """Importance of one monomial: L1 norm of the classifier weights reading its features."""
    return float(np.abs(block).sum())


@dataclass
class PruningState:
    """A monomial layer, the Linear that consumes its features and any batch norms in between."""

    layer: Module
    downstream: Linear
    between: list[BatchNorm] = field(default_factory=list)
    score: Callable[[np.ndarray], float] = l1_score
    history: list[tuple[int, int]] = field(default_factory=list)


def select_and_prune_monomials(state: PruningState, schedule, epoch: int) -> list:
    """Keep the top-n monomials when ``epoch`` is a schedule point; returns the surviving terms.

    Features are laid out monomial-major, so monomial p owns rows
    p*C .. (p+1)*C of the downstream weight matrix.
    """
    targets = dict(schedule)
    layer = state.layer
    if epoch not in targets:
        return list(layer.terms)
    target = targets[epoch]
    n = len(layer.terms)
    if n < target:
        raise ValueError(f"cannot prune {n} monomials up to {target}")
    c = layer.channels
    w = np.asarray(state.downstream.weight.data)
    if w.shape[0] != n * c:
        raise ShapeError(f"downstream layer reads {w.shape[0]} features, monomial layer makes {n * c}")
    scores = np.array([state.score(w[p * c:(p + 1) * c]) for p in range(n)])
    # stable: ties keep the earlier monomial
    keep = np.sort(np.argsort(-scores, kind="stable")[:target])
    rows = np.concatenate([np.arange(p * c, (p + 1) * c) for p in keep]) if len(keep) else np.zeros(0, int)
    layer.terms = [layer.terms[p] for p in keep]
    state.downstream.keep_inputs(rows)
    for bn in state.between:
        bn.keep_channels(rows)
    state.history.append((epoch, target))
    return list(layer.terms)
