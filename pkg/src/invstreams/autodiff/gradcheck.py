"""Central finite-difference checks for recorded operations."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], index: int, step: float = 1e-4) -> np.ndarray:
    """d fn(*inputs) / d inputs[index] by central differences; ``fn`` returns a scalar Tensor."""
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    target = arrays[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = fn(*[Tensor(a) for a in arrays]).item()
        flat[i] = orig - step
        minus = fn(*[Tensor(a) for a in arrays]).item()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * step)
    return grad


def analytic_grads(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray]) -> list[np.ndarray]:
    tensors = [Tensor(a, requires_grad=True) for a in inputs]
    loss = fn(*tensors)
    loss.backward()
    return [t.grad if t.grad is not None else np.zeros(t.shape) for t in tensors]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], step: float = 1e-4) -> float:
    """Largest relative error between autodiff and finite differences over all inputs."""
    analytic = analytic_grads(fn, inputs)
    worst = 0.0
    for i in range(len(inputs)):
        worst = max(worst, relative_error(analytic[i], numerical_grad(fn, inputs, i, step)))
    return worst
