"""Recorded neural-network operations built on :mod:`invstreams.autodiff.tensor`."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

from .tensor import ShapeError, Tensor, apply_linear_map, as_tensor, mean

PADDINGS = ("same", "valid", "periodic")
_ALIASES = {"zero-same": "same", "zero": "same", "wrap": "periodic"}


def _padding_mode(padding: str) -> str:
    mode = _ALIASES.get(padding, padding)
    if mode not in PADDINGS:
        raise ValueError(f"unknown padding {padding!r}; expected one of {PADDINGS}")
    return mode


def _pad_array(x: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return x
    widths = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    if mode == "periodic":
        return np.pad(x, widths, mode="wrap")
    return np.pad(x, widths)


def _unpad_grad(gp: np.ndarray, pad: int, mode: str, h: int, w: int) -> np.ndarray:
    if pad == 0:
        return gp
    if mode != "periodic":
        return gp[:, :, pad:pad + h, pad:pad + w]
    # fold wrapped borders back onto the interior (pad may exceed h or w)
    out = np.zeros(gp.shape[:2] + (h, w))
    hp, wp = gp.shape[2], gp.shape[3]
    rows = (np.arange(hp) - pad) % h
    cols = (np.arange(wp) - pad) % w
    tmp = np.zeros(gp.shape[:2] + (h, wp))
    np.add.at(tmp, (slice(None), slice(None), rows), gp)
    np.add.at(out, (slice(None), slice(None), slice(None), cols), tmp)
    return out


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation of ``x[B,C_in,H,W]`` with ``kernel[C_out,C_in,k,k]``.

    ``same`` zero-pads by (k-1)/2, ``periodic`` wraps by the same amount and
    ``valid`` does not pad. No bias is added.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    mode = _padding_mode(padding)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    b, c_in, h, w = x.shape
    c_out, c_k, kh, kw = kernel.shape
    if c_k != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {c_in} channels, kernel expects {c_k}")
    if kh != kw:
        raise ShapeError(f"conv2d needs square kernels, got {kh}x{kw}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    k = kh
    if mode != "valid" and k % 2 == 0:
        raise ShapeError("same/periodic padding needs an odd kernel size")
    pad = 0 if mode == "valid" else (k - 1) // 2
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeError(f"kernel {k}x{k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")

    xp = _pad_array(x.data, pad, mode)
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # im2col rows are (b, i, j), columns (c, di, dj)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c_in * k * k)
    kmat = kernel.data.reshape(c_out, c_in * k * k)
    out = (cols @ kmat.T).reshape(b, ho, wo, c_out).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * ho * wo, c_out)
        gk = (g2.T @ cols).reshape(kernel.shape)
        dcols = np.ascontiguousarray((g2 @ kmat).reshape(b, ho, wo, c_in, k, k).transpose(4, 5, 0, 3, 1, 2))
        gp = np.zeros((b, c_in, hp, wp))
        span_h = stride * (ho - 1) + 1
        span_w = stride * (wo - 1) + 1
        for i in range(k):
            for j in range(k):
                gp[:, :, i:i + span_h:stride, j:j + span_w:stride] += dcols[i, j]
        return _unpad_grad(gp, pad, mode, h, w), gk

    return Tensor._make(np.ascontiguousarray(out), (x, kernel), backward, "conv2d")


def depthwise_conv2d(x: Tensor, kernel: Tensor, padding: str = "same") -> Tensor:
    """Per-channel correlation of ``x[B,C,H,W]`` with ``kernel[C,k,k]`` (stride 1)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    mode = _padding_mode(padding)
    b, c, h, w = x.shape
    if kernel.ndim != 3 or kernel.shape[0] != c or kernel.shape[1] != kernel.shape[2]:
        raise ShapeError(f"depthwise kernel must be [{c}, k, k], got {kernel.shape}")
    k = kernel.shape[1]
    if mode != "valid" and k % 2 == 0:
        raise ShapeError("same/periodic padding needs an odd kernel size")
    pad = 0 if mode == "valid" else (k - 1) // 2
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeError(f"kernel {k}x{k} larger than padded input")
    xp = _pad_array(x.data, pad, mode)
    hp, wp = xp.shape[2], xp.shape[3]
    ho, wo = hp - k + 1, wp - k + 1
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))
    kd = kernel.data
    out = np.einsum("bchwij,cij->bchw", cols, kd, optimize=True)

    def backward(g):
        gk = np.einsum("bchw,bchwij->cij", g, cols, optimize=True)
        gp = np.zeros((b, c, hp, wp))
        for i in range(k):
            for j in range(k):
                gp[:, :, i:i + ho, j:j + wo] += g * kd[None, :, i, j, None, None]
        return _unpad_grad(gp, pad, mode, h, w), gk

    return Tensor._make(out, (x, kernel), backward, "depthwise_conv2d")


# -- bilinear resampling -------------------------------------------------------

def bilinear_matrix(coords: np.ndarray, in_hw: tuple[int, int], snap: float = 1e-9) -> sparse.csr_matrix:
    """Sparse matrix sampling an ``in_hw`` grid at real ``coords[..., (row, col)]``.

    Rows index flattened output pixels, columns flattened input pixels. Reads
    outside the grid contribute zero. Coordinates within ``snap`` of an integer
    are snapped so that exact permutations stay exact.
    """
    h, w = in_hw
    coords = np.asarray(coords, dtype=np.float64)
    if not np.all(np.isfinite(coords)):
        raise ValueError("resampling coordinates must be finite")
    out_shape = coords.shape[:-1]
    r = coords[..., 0].reshape(-1)
    c = coords[..., 1].reshape(-1)
    r = np.where(np.abs(r - np.round(r)) < snap, np.round(r), r)
    c = np.where(np.abs(c - np.round(c)) < snap, np.round(c), c)
    r0 = np.floor(r)
    c0 = np.floor(c)
    fr = r - r0
    fc = c - c0
    rows, cols, vals = [], [], []
    n_out = r.size
    out_idx = np.arange(n_out)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr = r0.astype(np.int64) + dr
            cc = c0.astype(np.int64) + dc
            wt = wr * wc
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w) & (wt != 0.0)
            rows.append(out_idx[ok])
            cols.append(rr[ok] * w + cc[ok])
            vals.append(wt[ok])
    m = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_out, h * w),
    )
    m.sum_duplicates()
    m.out_shape = tuple(int(s) for s in out_shape)  # type: ignore[attr-defined]
    return m


def bilinear_resample(x: Tensor, coords: np.ndarray) -> Tensor:
    """Sample ``x[..., H, W]`` at per-output-pixel source ``coords[H', W', 2]``."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("bilinear_resample needs at least a 2-D input")
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 3 or coords.shape[-1] != 2:
        raise ShapeError(f"coords must have shape [H', W', 2], got {coords.shape}")
    m = bilinear_matrix(coords, x.shape[-2:])
    return apply_linear_map(x, m, 2, coords.shape[:2])


def resample_with(x: Tensor, matrix) -> Tensor:
    """Apply a precomputed :func:`bilinear_matrix` to the trailing two axes."""
    return apply_linear_map(as_tensor(x), matrix, 2, matrix.out_shape)


# -- pooling -------------------------------------------------------------------

def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling over the last two axes (trailing rows/cols dropped)."""
    x = as_tensor(x)
    *lead, h, w = x.shape
    ho, wo = h // size, w // size
    xd = x.data[..., : ho * size, : wo * size]
    blocks = xd.reshape(*lead, ho, size, wo, size)
    out = blocks.max(axis=(-3, -1))

    def backward(g):
        mask = blocks == out[..., :, None, :, None]
        mask = mask / mask.sum(axis=(-3, -1), keepdims=True)
        gb = mask * g[..., :, None, :, None]
        full = np.zeros(x.shape)
        full[..., : ho * size, : wo * size] = gb.reshape(*lead, ho * size, wo * size)
        return (full,)

    return Tensor._make(out, (x,), backward, "max_pool2d")


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    x = as_tensor(x)
    *lead, h, w = x.shape
    ho, wo = h // size, w // size
    xd = x.data[..., : ho * size, : wo * size]
    out = xd.reshape(*lead, ho, size, wo, size).mean(axis=(-3, -1))

    def backward(g):
        gb = np.repeat(np.repeat(g, size, axis=-2), size, axis=-1) / (size * size)
        full = np.zeros(x.shape)
        full[..., : ho * size, : wo * size] = gb
        return (full,)

    return Tensor._make(out, (x,), backward, "avg_pool2d")


# -- regularisation and normalisation -----------------------------------------

def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout. In eval mode (or rate 0) the input is returned unchanged."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    channel_axis: int = 1,
) -> Tensor:
    """Per-channel batch normalisation.

    Statistics are taken over every axis except ``channel_axis``. In training
    mode ``running_mean``/``running_var`` are updated in place with
    ``(1 - momentum) * old + momentum * batch`` (unbiased variance).
    """
    x = as_tensor(x)
    axes = tuple(i for i in range(x.ndim) if i != channel_axis % x.ndim)
    bshape = [1] * x.ndim
    bshape[channel_axis] = x.shape[channel_axis]
    g = gamma.reshape(bshape)
    bt = beta.reshape(bshape)
    if training:
        mu = mean(x, axis=axes, keepdims=True)
        centered = x - mu
        var = mean(centered * centered, axis=axes, keepdims=True)
        n = x.size / x.shape[channel_axis]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * var.data.reshape(-1) * (n / max(n - 1.0, 1.0))
        xhat = centered / ((var + eps) ** 0.5)
    else:
        rm = Tensor(running_mean.reshape(bshape))
        rv = Tensor(running_var.reshape(bshape))
        xhat = (x - rm) / ((rv + eps) ** 0.5)
    return xhat * g + bt


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    soft = np.exp(out)
    return Tensor._make(out, (logits,), lambda g: (g - soft * g.sum(axis=1, keepdims=True),), "log_softmax")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``logits[B, K]`` against integer ``labels[B]``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} are incompatible")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    bsz = logits.shape[0]
    loss = float(np.mean(lse - z[np.arange(bsz), labels]))

    def backward(g):
        soft = np.exp(z - lse[:, None])
        soft[np.arange(bsz), labels] -= 1.0
        return (soft * (float(g) / bsz),)

    return Tensor._make(np.array(loss), (logits,), backward, "softmax_cross_entropy")
