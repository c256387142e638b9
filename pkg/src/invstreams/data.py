"""Datasets: IDX files, a procedural glyph generator, balanced subsets and scale augmentation."""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

N_GLYPHS = 10
GLYPH_NAMES = ("bar", "plus", "ring", "corner", "tee", "triangle", "square", "disk", "double-bar", "two-dots")
NUISANCES = ("none", "rotation", "scale", "both")
SCALE_RANGE = (0.3, 1.0)
FIXED_SCALE = 0.65

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] in [0, 1]
    labels: np.ndarray  # [N]
    n_classes: int = N_GLYPHS
    split: str = "train"
    provenance: dict = field(default_factory=dict)
    factors: dict = field(default_factory=dict)  # per-sample nuisance parameters, if known

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N,C,H,W], got {self.images.shape}")
        if len(self.images) == 0:
            raise ValueError("a dataset needs at least one sample")
        if self.labels.shape != (len(self.images),):
            raise ValueError(f"{len(self.images)} images but labels of shape {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, index: np.ndarray, split: str | None = None, provenance: dict | None = None) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.images[index], self.labels[index], self.n_classes, split or self.split,
                       provenance if provenance is not None else dict(self.provenance),
                       {k: np.asarray(v)[index] for k, v in self.factors.items()})

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


# -- IDX ---------------------------------------------------------------------------

class IdxFormatError(ValueError):
    pass


class WrongMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse an unsigned-byte IDX file into a uint8 array."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: file shorter than the IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise WrongMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedFileError(f"{path}: header declares {ndim} dims but the file ends early")
    dims = struct.unpack(">" + "I" * ndim, raw[4:head])
    size = int(np.prod(dims))
    if len(raw) - head < size:
        raise TruncatedFileError(f"{path}: expected {size} data bytes, found {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=head).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    payload = struct.pack(">I", magic) + struct.pack(">" + "I" * array.ndim, *array.shape) + array.tobytes()
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(payload)


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    n_classes = max(int(labels.max()) + 1, N_GLYPHS) if labels.size else N_GLYPHS
    return Dataset(images[:, None].astype(np.float64) / 255.0, labels.astype(np.int64), n_classes, split,
                   {"source": "idx", "images": str(images_path), "labels": str(labels_path)})


# -- procedural glyphs ---------------------------------------------------------------

def _segments(name: str) -> tuple[list, list]:
    """Stroke segments and filled disks (centre, radius) in glyph units (|coord| <= 1)."""
    s, d = [], []
    if name == "bar":
        s = [((-0.8, 0.0), (0.8, 0.0))]
    elif name == "plus":
        s = [((-0.7, 0.0), (0.7, 0.0)), ((0.0, -0.7), (0.0, 0.7))]
    elif name == "corner":
        s = [((-0.6, -0.6), (-0.6, 0.7)), ((-0.6, -0.6), (0.7, -0.6))]
    elif name == "tee":
        s = [((-0.7, 0.6), (0.7, 0.6)), ((0.0, 0.6), (0.0, -0.8))]
    elif name == "triangle":
        pts = [(0.8 * np.cos(a), 0.8 * np.sin(a)) for a in np.radians([90, 210, 330])]
        s = [(pts[i], pts[(i + 1) % 3]) for i in range(3)]
    elif name == "square":
        pts = [(-0.6, -0.6), (0.6, -0.6), (0.6, 0.6), (-0.6, 0.6)]
        s = [(pts[i], pts[(i + 1) % 4]) for i in range(4)]
    elif name == "double-bar":
        s = [((-0.7, -0.4), (0.7, -0.4)), ((-0.7, 0.4), (0.7, 0.4))]
    elif name == "disk":
        d = [((0.0, 0.0), 0.5)]
    elif name == "two-dots":
        d = [((-0.5, 0.0), 0.22), ((0.5, 0.0), 0.22)]
    return s, d


def _segment_distance(px: np.ndarray, py: np.ndarray, a, b) -> np.ndarray:
    ax, ay = a
    bx, by = b
    vx, vy = bx - ax, by - ay
    t = np.clip(((px - ax) * vx + (py - ay) * vy) / (vx * vx + vy * vy), 0.0, 1.0)
    return np.hypot(px - ax - t * vx, py - ay - t * vy)


STROKE = 0.12  # half width in glyph units
RING_RADIUS = 0.7
EDGE_PX = 1.0


def render_glyph(cls: int, size: int, scale: float, angle_deg: float, center: tuple[float, float],
                 radius_px: float | None = None, edge_px: float = EDGE_PX) -> np.ndarray:
    """Anti-aliased rendering of glyph ``cls`` on a size x size canvas.

    Glyph units are mapped to pixels by ``scale * radius_px`` (default size * 0.43),
    so every nuisance is a similarity transform of the same shape. Coverage
    ramps linearly over ``edge_px`` pixels across the outline, a soft pen.
    """
    radius_px = size * 0.43 if radius_px is None else radius_px
    unit = scale * radius_px
    rows, cols = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    # pixel -> glyph coordinates (x to the right, y up)
    dx = (cols - center[1]) / unit
    dy = -(rows - center[0]) / unit
    t = np.radians(angle_deg)
    c, s = np.cos(t), np.sin(t)
    gx = c * dx + s * dy
    gy = -s * dx + c * dy
    name = GLYPH_NAMES[cls]
    if name == "ring":
        dist = np.abs(np.hypot(gx, gy) - RING_RADIUS) - STROKE
    else:
        segs, disks = _segments(name)
        dist = np.full(gx.shape, np.inf)
        for a, b in segs:
            dist = np.minimum(dist, _segment_distance(gx, gy, a, b) - STROKE)
        for (cx, cy), r in disks:
            dist = np.minimum(dist, np.hypot(gx - cx, gy - cy) - r)
    # signed distance in pixels -> coverage
    return np.clip(0.5 - dist * unit / edge_px, 0.0, 1.0)


def synth_generate(n: int, nuisances: str = "none", seed: int = 0, size: int = 28,
                   split: str = "train") -> Dataset:
    """Balanced glyph dataset; scale s ~ U[0.3, 1] and/or angle ~ U[0, 360) per ``nuisances``.

    Positions are random with the glyph kept inside the canvas. Without a scale
    nuisance the glyph scale is fixed at 0.65.
    """
    if nuisances not in NUISANCES:
        raise ValueError(f"unknown nuisance setting {nuisances!r}; expected one of {NUISANCES}")
    if n < N_GLYPHS:
        raise ValueError(f"need at least {N_GLYPHS} samples for a balanced set, got {n}")
    rng = np.random.default_rng([seed, size, NUISANCES.index(nuisances)])
    labels = rng.permutation(np.arange(n) % N_GLYPHS)
    scales = rng.uniform(*SCALE_RANGE, size=n) if nuisances in ("scale", "both") else np.full(n, FIXED_SCALE)
    angles = rng.uniform(0.0, 360.0, size=n) if nuisances in ("rotation", "both") else np.zeros(n)
    jitter = rng.uniform(-1.0, 1.0, size=(n, 2))
    radius_px = size * 0.43
    images = np.empty((n, 1, size, size))
    mid = (size - 1) / 2.0
    for i in range(n):
        extent = (1.0 + STROKE) * scales[i] * radius_px
        margin = max(0.0, mid - extent - 0.5)
        centre = (mid + jitter[i, 0] * margin, mid + jitter[i, 1] * margin)
        images[i, 0] = render_glyph(int(labels[i]), size, scales[i], angles[i], centre, radius_px)
    prov = {"source": "synth", "n": n, "nuisances": nuisances, "seed": seed, "size": size}
    return Dataset(images, labels, N_GLYPHS, split, prov, {"scale": scales, "angle": angles})


# -- subsets and augmentation ------------------------------------------------------------

def subset_balanced(d: Dataset, n_t: int, seed: int) -> Dataset:
    """n_t / n_c samples per class chosen by a seeded shuffle within each class."""
    if n_t <= 0 or n_t % d.n_classes:
        raise ValueError(f"subset size {n_t} is not a positive multiple of {d.n_classes} classes")
    per = n_t // d.n_classes
    picks = []
    for c in range(d.n_classes):
        idx = np.flatnonzero(d.labels == c)
        if len(idx) < per:
            raise ValueError(f"class {c} has {len(idx)} samples, {per} requested")
        order = np.random.default_rng([seed, c]).permutation(len(idx))
        picks.append(idx[order[:per]])
    index = np.sort(np.concatenate(picks))
    prov = {"parent": d.provenance, "subset_size": n_t, "subset_seed": seed}
    return d.take(index, provenance=prov)


def zoom_array(img: np.ndarray, factor: float) -> np.ndarray:
    """Bilinear zoom of the last two axes about the centre, same canvas (crop or zero pad)."""
    h, w = img.shape[-2:]
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - centre / factor
    flat = img.reshape(-1, h, w)
    out = np.stack([ndimage.affine_transform(p, np.eye(2) / factor, offset=offset, order=1,
                                             mode="grid-constant", cval=0.0) for p in flat])
    return out.reshape(img.shape)


def augment_scale(batch: np.ndarray, s_range=(0.5, 2.0), seed=0) -> np.ndarray:
    """Zoom every sample by its own s ~ U[s_range] about the image centre, keeping the size."""
    lo, hi = s_range
    if lo == hi == 1.0:
        return np.array(batch, dtype=np.float64)
    rng = np.random.default_rng(seed)
    factors = rng.uniform(lo, hi, size=len(batch))
    out = np.stack([zoom_array(x, s) for x, s in zip(batch, factors)])
    return np.clip(out, 0.0, 1.0)


def scaled_mnist(d: Dataset, seed: int, s_range=SCALE_RANGE, split: str | None = None) -> Dataset:
    """Shrink every digit by s ~ U[s_range] about the centre (Scaled-MNIST construction)."""
    rng = np.random.default_rng(seed)
    factors = rng.uniform(*s_range, size=len(d))
    imgs = np.clip(np.stack([zoom_array(x, s) for x, s in zip(d.images, factors)]), 0.0, 1.0)
    prov = {"parent": d.provenance, "scaled_mnist_seed": seed, "s_range": list(s_range)}
    return Dataset(imgs, d.labels, d.n_classes, split or d.split, prov, {"scale": factors})
