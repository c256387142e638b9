"""Model assembly from JSON architecture descriptions, optimizers, training loop, checkpoints."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import ShapeError, Tensor, no_grad, softmax_cross_entropy
from .checkpoint import load_checkpoint, save_checkpoint
from .data import augment_scale
from .groups import GroupSpec
from .invariant import (
    PruningState,
    RotationMonomialII,
    ScaleMonomialII,
    ScaleWSII,
    WSRotationII,
    MonomialPair,
    MonomialSpec,
    random_monomial,
    random_monomial_pairs,
    select_and_prune_monomials,
)
from .layers import GConvLayer, GroupBatchNorm, GroupFeature, GroupMaxPool, GroupMaxProject, GroupReLU, SpatialPool
from .metrics import test_error
from .nn import AvgPool, BatchNorm, Conv2d, Dropout, Flatten, Linear, Module, Sequential, Upsample

CHECKPOINT_FORMAT = "invstreams-checkpoint"
METRIC_COLUMNS = ("epoch", "lr", "train_loss", "train_error", "eval_error")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def content_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


# -- configuration --------------------------------------------------------------------

@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    dropout: float | None = None
    batch_size: int = 64
    epochs: int = 10
    milestones: tuple[int, ...] = ()
    lr_decay: float = 0.1
    seed: int = 0
    augment_scale: tuple[float, float] | None = None
    pruning_schedule: tuple[tuple[int, int], ...] = ()
    arch: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        for name in ("lr", "momentum", "adam_eps", "weight_decay", "lr_decay"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be a finite number >= 0, got {v!r}")
        if self.dropout is not None and not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if int(self.batch_size) < 1 or int(self.epochs) < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        self.betas = tuple(float(b) for b in self.betas)
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("betas must be two numbers in [0, 1)")
        self.milestones = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"milestones must be strictly increasing, got {self.milestones}")
        if self.augment_scale is not None:
            lo, hi = (float(v) for v in self.augment_scale)
            if not 0 < lo <= hi:
                raise ConfigError("augment_scale must be [lo, hi] with 0 < lo <= hi")
            self.augment_scale = (lo, hi)
        self.pruning_schedule = tuple((int(e), int(n)) for e, n in self.pruning_schedule)
        if any(b[0] <= a[0] for a, b in zip(self.pruning_schedule, self.pruning_schedule[1:])):
            raise ConfigError("pruning schedule epochs must be strictly increasing")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["milestones"] = list(self.milestones)
        d["augment_scale"] = list(self.augment_scale) if self.augment_scale else None
        d["pruning_schedule"] = [list(p) for p in self.pruning_schedule]
        return d

    def hash(self) -> str:
        return content_hash(self.to_dict())

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** sum(1 for m in self.milestones if epoch >= m)


# -- model assembly -------------------------------------------------------------------

class Network(Module):
    """``body`` maps images to an invariant feature vector, ``head`` classifies it."""

    def __init__(self, body: Sequential, head: Sequential, arch: dict, seed: int):
        super().__init__()
        self.body = body
        self.head = head
        self.arch = arch
        self.seed = seed

    def forward(self, x):
        return self.head(self.body(x))

    def features(self, x):
        return self.body(x)

    def upto(self, name: str) -> Module:
        """The body prefix ending at layer ``name`` as a stand-alone module."""
        names = [n for n, _ in self.body.layers()]
        if name not in names:
            raise KeyError(f"no body layer named {name!r}")
        return Sequential(self.body.layers()[: names.index(name) + 1])

    def trace_layers(self) -> list[tuple[str, Module]]:
        return [(f"body.{n}", m) for n, m in self.body.layers()] + [(f"head.{n}", m) for n, m in self.head.layers()]

    @property
    def feature_width(self) -> int:
        return int(self.arch.get("_feature_width", 0))

    def monomial_layers(self) -> list[tuple[str, Module]]:
        return [(n, m) for n, m in self.body.layers() if isinstance(m, (ScaleMonomialII, RotationMonomialII))]

    def monomial_state(self) -> dict:
        return {n: [t.to_dict() for t in m.terms] for n, m in self.monomial_layers()}

    def restore_monomials(self, state: dict) -> None:
        for n, m in self.monomial_layers():
            if n in state:
                cls = MonomialPair if isinstance(m, ScaleMonomialII) else MonomialSpec
                m.terms = [cls.from_dict(t) for t in state[n]]

    def pruning_states(self) -> list[PruningState]:
        """Pair each monomial layer with the first Linear of the head and the norms before it."""
        layers = self.monomial_layers()
        if not layers:
            return []
        if len(layers) > 1:
            raise ConfigError("at most one monomial layer per network is supported")
        between = []
        body = self.body.layers()
        start = [n for n, _ in body].index(layers[0][0]) + 1
        for _, mod in body[start:] + self.head.layers():
            if isinstance(mod, Linear):
                return [PruningState(layers[0][1], mod, between)]
            if isinstance(mod, BatchNorm):
                between.append(mod)
            elif isinstance(mod, GroupBatchNorm):
                between.append(mod.bn)
        raise ConfigError("a monomial layer needs a dense layer in the head")


def _as_int(spec: dict, key: str, default=None) -> int:
    v = spec.get(key, default)
    if v is None:
        raise ConfigError(f"layer {spec.get('name')!r} needs {key!r}")
    return int(v)


def _channels(x) -> int:
    t = x.tensor if isinstance(x, GroupFeature) else x
    return t.shape[1]


def _make_layer(spec: dict, x, rng: np.random.Generator, ctx: dict) -> Module:
    kind = spec["type"]
    name = spec["name"]
    padding = spec.get("padding", "same")
    k = int(spec.get("kernel_size", 3))
    if kind == "upsample":
        return Upsample(int(spec.get("factor", 2)), spec.get("mode", "bilinear"))
    if kind == "conv":
        if isinstance(x, GroupFeature) or x.ndim != 4:
            raise ShapeError(f"layer {name!r}: conv needs a [B,C,H,W] input")
        return Conv2d(_channels(x), _as_int(spec, "channels"), k, rng, int(spec.get("stride", 1)), padding)
    if kind == "lift":
        if isinstance(x, GroupFeature) or x.ndim != 4:
            raise ShapeError(f"layer {name!r}: lift needs a [B,C,H,W] input")
        group = GroupSpec.from_dict(spec["group"])
        ctx["group_order"] = group.order
        return GConvLayer(_channels(x), _as_int(spec, "channels"), group, k, 1, int(spec.get("stride", 1)), padding, rng)
    if kind == "gconv":
        if not isinstance(x, GroupFeature):
            raise ShapeError(f"layer {name!r}: gconv needs a group feature; lift first")
        group = x.spec
        default_extent = 1 if group.is_scale else group.order
        extent = int(spec.get("extent", default_extent))
        return GConvLayer(_channels(x), _as_int(spec, "channels"), group, k, extent,
                          int(spec.get("stride", 1)), padding, rng)
    if kind == "bn":
        return GroupBatchNorm(_channels(x), float(spec.get("momentum", 0.1)), float(spec.get("eps", 1e-5)))
    if kind == "relu":
        return GroupReLU()
    if kind == "maxpool":
        return GroupMaxPool(int(spec.get("size", 2)))
    if kind == "avgpool":
        return AvgPool(int(spec.get("size", 2)))
    if kind == "dropout":
        rate = ctx["dropout"] if ctx.get("dropout") is not None else float(spec.get("rate", 0.0))
        return Dropout(rate)
    if kind == "group_max":
        if not isinstance(x, GroupFeature):
            raise ShapeError(f"layer {name!r}: group_max needs a group feature")
        return GroupMaxProject()
    if kind == "flatten":
        return Flatten()
    if kind == "dense":
        if isinstance(x, GroupFeature) or x.ndim != 2:
            raise ShapeError(f"layer {name!r}: dense needs a flat [B,D] input, got {_shape(x)}; add pooling or II first")
        return Linear(x.shape[1], _as_int(spec, "units"), rng, bool(spec.get("bias", True)))
    # everything below reduces [B,C,H,W] to [B,D]
    if isinstance(x, GroupFeature) or x.ndim != 4:
        raise ShapeError(f"layer {name!r}: {kind} needs a [B,C,H,W] input, got {_shape(x)}; project the group axis first")
    c = _channels(x)
    if kind == "pool":
        return SpatialPool(spec.get("mode", "avg"), int(spec.get("window", 2)))
    if kind == "ws_ii":
        return WSRotationII(c, k, int(spec.get("n_rot", 4)), int(spec.get("n_flip", 2)), padding, rng)
    if kind == "scale_ws_ii":
        return ScaleWSII(c, int(spec.get("channels", c)), k, float(spec.get("eps", 1e-6)), padding, rng)
    if kind == "scale_monomial_ii":
        pairs = random_monomial_pairs(int(spec.get("pairs", 25)), rng, int(spec.get("arity", 2)),
                                      int(spec.get("radius", 2)), tuple(spec.get("exponent_range", (0.5, 2.0))),
                                      ctx.get("group_order"))
        return ScaleMonomialII(c, pairs, float(spec.get("eps", 1e-6)), padding, ctx.get("group_order"))
    if kind == "rot_monomial_ii":
        n_rot = int(spec.get("n_rot", 4))
        order = ctx.get("group_order") or n_rot
        monos = [random_monomial(rng, int(spec.get("arity", 2)), int(spec.get("radius", 2)),
                                 tuple(spec.get("exponent_range", (0.5, 2.0))), order)
                 for _ in range(int(spec.get("monomials", 25)))]
        return RotationMonomialII(c, monos, n_rot, float(spec.get("eps", 1e-6)), padding, order)
    raise ConfigError(f"layer {name!r}: unknown layer type {kind!r}")


def _shape(x) -> tuple:
    return (x.tensor if isinstance(x, GroupFeature) else x).shape


def build_model(arch: dict, seed: int = 0, dropout: float | None = None) -> Network:
    """Assemble a Network, checking shapes layer by layer on a probe input.

    The body ends at the layer flagged ``"features": true`` or, without a
    flag, at the first layer producing a flat [B, D] output (pooling or an
    invariant-integration layer); the rest forms the head.
    """
    try:
        c, h, w = (int(v) for v in arch["input_shape"])
        layer_specs = list(arch["layers"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"architecture needs input_shape [C,H,W] and a layers list ({exc})") from None
    body, head = Sequential(), Sequential()
    x = Tensor(np.full((2, c, h, w), 0.5))
    ctx = {"dropout": dropout}
    in_body = True
    width = None
    specs = []
    marked = any(l.get("features") for l in layer_specs)
    for i, raw in enumerate(layer_specs):
        if "type" not in raw:
            raise ConfigError(f"layer {i} has no type")
        spec = dict(raw)
        spec.setdefault("name", f"{spec['type']}{i}")
        specs.append(spec)
        layer = _make_layer(spec, x, np.random.default_rng([seed, i]), ctx)
        layer.eval()
        try:
            with no_grad():
                y = layer(x)
        except (ShapeError, ValueError) as exc:
            raise ShapeError(f"layer {spec['name']!r} ({spec['type']}): {exc}") from None
        (body if in_body else head).add(spec["name"], layer)
        flat = not isinstance(y, GroupFeature) and y.ndim == 2
        if in_body and flat and (spec.get("features") or (not marked and width is None)):
            width = y.shape[1]
            in_body = bool(marked) and not spec.get("features")
        elif in_body and spec.get("features"):
            raise ShapeError(f"layer {spec['name']!r} is marked as features but outputs {_shape(y)}")
        x = y
    if in_body:
        raise ShapeError("architecture never reduces to a flat feature vector")
    n_classes = arch.get("n_classes")
    if n_classes is not None and (isinstance(x, GroupFeature) or x.ndim != 2 or x.shape[1] != int(n_classes)):
        raise ShapeError(f"final layer yields {_shape(x)}, expected [B, {n_classes}] logits")
    resolved = {"input_shape": [c, h, w], "layers": specs, "_feature_width": width}
    if n_classes is not None:
        resolved["n_classes"] = int(n_classes)
    net = Network(body, head, resolved, seed)
    net.train()
    return net


# -- optimizers -------------------------------------------------------------------------

class Optimizer:
    slots: tuple[str, ...] = ()

    def __init__(self, weight_decay: float = 0.0):
        self.weight_decay = weight_decay
        self.state: dict[str, dict[str, np.ndarray]] = {s: {} for s in self.slots}
        self.t = 0

    def _slot(self, slot: str, name: str, shape) -> np.ndarray:
        arr = self.state[slot].get(name)
        if arr is None or arr.shape != shape:
            arr = np.zeros(shape)
            self.state[slot][name] = arr
        return arr

    def step(self, named_params, lr: float) -> None:
        self.t += 1
        for name, p in named_params:
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            new = self._update(name, p.data, g, lr)
            new.flags.writeable = False
            p.data = new

    def _update(self, name, theta, g, lr) -> np.ndarray:
        raise NotImplementedError

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"opt/{s}/{n}": a for s in self.slots for n, a in sorted(self.state[s].items())}

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.state = {s: {} for s in self.slots}
        for key, arr in arrays.items():
            if key.startswith("opt/"):
                _, slot, name = key.split("/", 2)
                self.state[slot][name] = np.array(arr)
        self.t = int(t)


class SGD(Optimizer):
    """Heavy-ball momentum: v = mu v - lr g; theta += v."""

    slots = ("velocity",)

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(weight_decay)
        self.momentum = momentum

    def _update(self, name, theta, g, lr):
        v = self._slot("velocity", name, theta.shape)
        v *= self.momentum
        v -= lr * g
        return theta + v


class Adam(Optimizer):
    slots = ("m", "v")

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        super().__init__(weight_decay)
        self.b1, self.b2 = betas
        self.eps = eps

    def _update(self, name, theta, g, lr):
        m = self._slot("m", name, theta.shape)
        v = self._slot("v", name, theta.shape)
        m *= self.b1
        m += (1 - self.b1) * g
        v *= self.b2
        v += (1 - self.b2) * g * g
        mhat = m / (1 - self.b1 ** self.t)
        vhat = v / (1 - self.b2 ** self.t)
        return theta - lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(cfg: TrainConfig) -> Optimizer:
    if cfg.optimizer == "sgd":
        return SGD(cfg.momentum, cfg.weight_decay)
    return Adam(cfg.betas, cfg.adam_eps, cfg.weight_decay)


# -- checkpoints ----------------------------------------------------------------------------

def model_arrays(model: Module) -> dict[str, np.ndarray]:
    out = {}
    for name, p in model.named_parameters():
        out[f"param/{name}"] = np.asarray(p.data)
    for name, b in model.named_buffers():
        out[f"buffer/{name}"] = np.asarray(b)
    return out


def model_state_from_arrays(arrays: dict[str, np.ndarray], prefix: str = "") -> dict[str, np.ndarray]:
    state = {}
    for key, arr in arrays.items():
        for kind in ("param/", "buffer/"):
            if key.startswith(prefix + kind):
                state[key[len(prefix + kind):]] = arr
    return state


def save_network(path, model: Network, cfg: TrainConfig, opt: Optimizer | None = None, epoch: int = 0,
                 metrics: list[dict] | None = None, extra: dict | None = None) -> None:
    arrays = model_arrays(model)
    if opt is not None:
        arrays.update(opt.state_arrays())
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "kind": "network",
        "arch": model.arch,
        "seed": model.seed,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "epoch": epoch,
        "optimizer": {"kind": cfg.optimizer, "t": opt.t if opt else 0},
        "rng": {"scheme": "counter", "seed": cfg.seed},
        "monomials": model.monomial_state(),
        "metrics": metrics or [],
        "meta": extra or {},
    }
    save_checkpoint(path, arrays, header)


def load_network(path) -> tuple[Network, TrainConfig, dict, dict[str, np.ndarray]]:
    arrays, header = load_checkpoint(path)
    if header.get("format") != CHECKPOINT_FORMAT or header.get("kind") != "network":
        raise ConfigError(f"{path} is not a network checkpoint")
    cfg = TrainConfig.from_dict(header["config"])
    model = build_model(header["arch"], header["seed"], cfg.dropout)
    model.restore_monomials(header.get("monomials", {}))
    model.load_state_dict(model_state_from_arrays(arrays), allow_resize=True)
    return model, cfg, header, arrays


# -- training ---------------------------------------------------------------------------------

@dataclass
class TrainResult:
    metrics: list[dict]
    epochs_done: int


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r["epoch"], repr(r["lr"]), repr(r["train_loss"]), repr(r["train_error"]),
                    "" if r["eval_error"] is None else repr(r["eval_error"])])
    return buf.getvalue()


def _diagnose(model: Module, x: np.ndarray) -> str:
    layers = model.trace_layers() if hasattr(model, "trace_layers") else []
    h = Tensor(x)
    with no_grad():
        for name, layer in layers:
            h = layer(h)
            t = h.tensor if isinstance(h, GroupFeature) else h
            if not np.all(np.isfinite(t.data)):
                return name
    return "loss"


def fit(model: Module, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
        eval_fn: Callable[[Module], float] | None = None,
        metrics_path=None, checkpoint_fn: Callable[[Optimizer, int, list], None] | None = None,
        opt: Optimizer | None = None, start_epoch: int = 0, history: list[dict] | None = None,
        stop_after: int | None = None, pruning: list[PruningState] | None = None) -> TrainResult:
    """Mini-batch training with counter-based randomness.

    Epoch shuffles, augmentation and dropout masks are drawn from generators
    seeded by (seed, purpose, epoch, step), so resuming at an epoch boundary
    replays exactly the same stream.
    """
    opt = opt or make_optimizer(cfg)
    rows = list(history or [])
    n = len(y)
    end = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(start_epoch, end):
        for state in pruning or []:
            select_and_prune_monomials(state, cfg.pruning_schedule, epoch)
        lr = cfg.lr_at(epoch)
        order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(n)
        model.train()
        loss_sum, wrong = 0.0, 0
        for step, i in enumerate(range(0, n, cfg.batch_size)):
            idx = order[i:i + cfg.batch_size]
            xb = x[idx]
            if cfg.augment_scale is not None and xb.ndim == 4:
                xb = augment_scale(xb, cfg.augment_scale, np.random.default_rng([cfg.seed, 2, epoch, step]))
            model.set_generator(np.random.default_rng([cfg.seed, 3, epoch, step]))
            logits = model(Tensor(xb))
            loss = softmax_cross_entropy(logits, y[idx])
            if not math.isfinite(loss.item()):
                where = _diagnose(model, xb)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}; first non-finite output in {where}")
            model.zero_grad()
            loss.backward()
            opt.step(model.named_parameters(), lr)
            loss_sum += loss.item() * len(idx)
            wrong += int((logits.data.argmax(axis=1) != y[idx]).sum())
        eval_error = eval_fn(model) if eval_fn is not None else None
        rows.append({"epoch": epoch + 1, "lr": lr, "train_loss": loss_sum / n,
                     "train_error": 100.0 * wrong / n, "eval_error": eval_error})
        if metrics_path is not None:
            Path(metrics_path).write_text(metrics_csv(rows))
        if checkpoint_fn is not None:
            checkpoint_fn(opt, epoch + 1, rows)
    return TrainResult(rows, end)


def train(model: Network, dataset, cfg: TrainConfig, eval_set=None, metrics_path=None,
          checkpoint_path=None, resume_from=None, stop_after: int | None = None) -> TrainResult:
    """Train ``model`` on ``dataset``; optionally checkpoint every epoch and resume from one."""
    opt = make_optimizer(cfg)
    start, history = 0, []
    if resume_from is not None:
        arrays, header = load_checkpoint(resume_from)
        if header.get("config_hash") != cfg.hash():
            raise ConfigError("checkpoint was written with a different config")
        model.restore_monomials(header.get("monomials", {}))
        model.load_state_dict(model_state_from_arrays(arrays), allow_resize=True)
        opt.load_state_arrays(arrays, header["optimizer"]["t"])
        start, history = int(header["epoch"]), list(header.get("metrics", []))

    def save(o, epoch, rows):
        if checkpoint_path is not None:
            save_network(checkpoint_path, model, cfg, o, epoch, rows)

    eval_fn = (lambda m: test_error(m, eval_set)) if eval_set is not None else None
    return fit(model, dataset.images, dataset.labels, cfg, eval_fn, metrics_path, save, opt, start, history,
               stop_after, model.pruning_states())


def evaluate(model: Module, dataset) -> float:
    """Percent top-1 error in eval mode."""
    return test_error(model, dataset)
