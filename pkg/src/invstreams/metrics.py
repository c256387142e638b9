"""Invariance/equivariance errors and classification error."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, no_grad
from .groups import GroupElement, GroupSpec, act_image, permute_group_axis, zoom_on_canvas


@dataclass(frozen=True)
class Transform:
    name: str
    apply: Callable[[np.ndarray], np.ndarray]


def scale_grid(start: float = 0.5, stop: float = 1.0, step: float = 0.05) -> list[float]:
    """Inclusive grid start, start+step, ... up to stop (1e-9 tolerance)."""
    if step <= 0:
        raise ValueError("grid step must be positive")
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    if n < 1:
        raise ValueError(f"empty grid {start}:{stop}:{step}")
    return [round(start + i * step, 12) for i in range(n)]


def zoom_transforms(factors: Sequence[float]) -> list[Transform]:
    """Canvas-preserving zooms L_s about the image centre."""
    return [Transform(f"scale={s:g}", lambda x, s=s: zoom_on_canvas(x, s).data) for s in factors]


def group_transforms(spec: GroupSpec, elements: Sequence[GroupElement] | None = None) -> list[Transform]:
    elements = list(spec.elements()) if elements is None else list(elements)
    out = []
    for g in elements:
        out.append(Transform(f"rot={g.rot},flip={g.flip},scale={g.scale}",
                             lambda x, g=g: act_image(g, x, spec).data))
    return out


@dataclass
class InvarianceReport:
    transforms: list[str]
    errors: np.ndarray  # [T, N_valid] squared relative errors
    n_samples: int
    n_skipped: int = 0
    kind: str = "invariance"
    meta: dict = field(default_factory=dict)

    @property
    def per_transform(self) -> np.ndarray:
        return self.errors.mean(axis=1) if self.errors.size else np.zeros(len(self.transforms))

    @property
    def delta(self) -> float:
        """Mean over transforms and valid samples."""
        return float(self.errors.mean()) if self.errors.size else 0.0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "delta": self.delta,
            "n_samples": self.n_samples,
            "n_skipped": self.n_skipped,
            "transforms": list(self.transforms),
            "per_transform": [float(v) for v in self.per_transform],
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["transform", "sample", "error", "aggregate"])
        agg = repr(self.delta)
        for t, name in enumerate(self.transforms):
            for i in range(self.errors.shape[1]):
                w.writerow([name, i, repr(float(self.errors[t, i])), agg])
        return buf.getvalue()


def _batched(fn: Callable, x: np.ndarray, batch_size: int) -> np.ndarray:
    outs = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            y = fn(Tensor(x[i:i + batch_size]))
            y = y.tensor if hasattr(y, "tensor") else y
            outs.append(np.asarray(y.data if isinstance(y, Tensor) else y))
    return np.concatenate(outs, axis=0)


def _relative_errors(ref: np.ndarray, moved: list[np.ndarray]) -> tuple[np.ndarray, int]:
    n = len(ref)
    ref = ref.reshape(n, -1)
    norms = (ref ** 2).sum(axis=1)
    valid = norms > 0
    errs = np.stack([((ref - m.reshape(n, -1)) ** 2).sum(axis=1) for m in moved])
    return errs[:, valid] / norms[valid], int((~valid).sum())


def _eval_mode(model):
    if hasattr(model, "eval"):
        model.eval()


def invariance_error(model: Callable, samples: np.ndarray, transforms: Sequence[Transform],
                     batch_size: int = 100) -> InvarianceReport:
    """Mean over transforms and samples of |psi(x) - psi(Lx)|^2 / |psi(x)|^2.

    Samples whose reference output has zero norm are skipped and counted.
    """
    _eval_mode(model)
    samples = np.asarray(samples, dtype=np.float64)
    ref = _batched(model, samples, batch_size)
    moved = [_batched(model, t.apply(samples), batch_size) for t in transforms]
    errs, skipped = _relative_errors(ref, moved)
    return InvarianceReport([t.name for t in transforms], errs, len(samples), skipped)


def equivariance_error(layer: Callable, samples: np.ndarray, spec: GroupSpec,
                       elements: Sequence[GroupElement] | None = None) -> InvarianceReport:
    """Compare layer(L_g x) with g acting on layer(x) through the regular representation."""
    _eval_mode(layer)
    elements = list(spec.elements()) if elements is None else list(elements)
    samples = np.asarray(samples, dtype=np.float64)
    with no_grad():
        ref = layer(Tensor(samples))
        moved, expected = [], []
        for g in elements:
            moved.append(layer(act_image(g, samples, spec)).tensor.data)
            expected.append(permute_group_axis(g, ref).tensor.data)
    n = len(samples)
    errs, skipped = [], 0
    for m, e in zip(moved, expected):
        norms = (e.reshape(n, -1) ** 2).sum(axis=1)
        valid = norms > 0
        errs.append(((m - e).reshape(n, -1) ** 2).sum(axis=1)[valid] / norms[valid])
        skipped = max(skipped, int((~valid).sum()))
    names = [f"rot={g.rot},flip={g.flip},scale={g.scale}" for g in elements]
    return InvarianceReport(names, np.stack(errs), n, skipped, kind="equivariance")


def predict(model: Callable, images: np.ndarray, batch_size: int = 200) -> np.ndarray:
    _eval_mode(model)
    logits = _batched(model, np.asarray(images, dtype=np.float64), batch_size)
    return logits.argmax(axis=1)


def test_error(model: Callable, dataset, batch_size: int = 200) -> float:
    """Top-1 error in percent."""
    images, labels = dataset.images, dataset.labels
    if len(labels) == 0:
        raise ValueError("cannot compute an error on an empty dataset")
    pred = predict(model, images, batch_size)
    return float(100.0 * np.mean(pred != labels))


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values")
    return float(v.mean()), float(v.std())
