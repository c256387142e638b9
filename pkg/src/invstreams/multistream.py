"""Multi-stream combination heads and the staged (frozen-stream) training protocol."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Tensor, concat, matmul, no_grad, stack, transpose
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import predict, test_error
from .nn import Linear, Module, Parameter
from .trainer import (
    CHECKPOINT_FORMAT,
    ConfigError,
    Network,
    TrainConfig,
    TrainResult,
    fit,
    load_network,
    model_arrays,
    model_state_from_arrays,
    build_model,
)

STREAM_ORDER = ("e2", "scale", "std")
HEAD_KINDS = ("map-e2", "map-scale", "map-std", "map-all", "concat")


def ordered_ids(ids) -> list[str]:
    unknown = set(ids) - set(STREAM_ORDER)
    if unknown:
        raise ValueError(f"unknown stream ids {sorted(unknown)}; expected a subset of {STREAM_ORDER}")
    return [j for j in STREAM_ORDER if j in ids]


class StreamBundle(Module):
    """Per-stream maps W_j, combination weights w_j and the output classifier.

    For map-X heads stream X keeps a fixed identity map; ``maps[j] is None``
    marks it. Concat heads have no maps or weights.
    """

    def __init__(self, widths: Mapping[str, int], kind: str, n_classes: int, c_map: int | None = None,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {kind!r}; expected one of {HEAD_KINDS}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.ids = ordered_ids(widths)
        self.widths = {j: int(widths[j]) for j in self.ids}
        self.kind = kind
        self.anchor = kind[4:] if kind.startswith("map-") and kind != "map-all" else None
        if self.anchor is not None and self.anchor not in self.widths:
            raise ValueError(f"head {kind} needs stream {self.anchor!r}, have {self.ids}")
        if kind == "concat":
            self.c_map = sum(self.widths.values())
        elif self.anchor is not None:
            self.c_map = self.widths[self.anchor]
        else:
            if c_map is None:
                raise ValueError("map-all needs an explicit c_map")
            self.c_map = int(c_map)
        self.maps: dict[str, Parameter | None] = {}
        if kind != "concat":
            for j in self.ids:
                if j == self.anchor:
                    self.maps[j] = None
                    continue
                bound = 1.0 / np.sqrt(self.widths[j])
                w = Parameter(rng.uniform(-bound, bound, size=(self.c_map, self.widths[j])))
                setattr(self, f"map_{j}", w)
                self.maps[j] = w
                setattr(self, f"weight_{j}", Parameter(np.ones(self.c_map)))
            if self.anchor is not None:
                setattr(self, f"weight_{self.anchor}", Parameter(np.ones(self.c_map)))
        self.classifier = Linear(self.c_map, n_classes, rng)

    def combo_weights(self) -> dict[str, Parameter]:
        return {j: getattr(self, f"weight_{j}") for j in self.ids} if self.kind != "concat" else {}

    def normalized_weights(self) -> dict[str, Tensor]:
        raw = self.combo_weights()
        total = stack([raw[j] for j in self.ids], axis=0).sum(axis=0)
        if np.any(total.data < 1e-8):
            raise ValueError("combination weights sum to (almost) zero or below for some channel")
        return {j: raw[j] / total for j in self.ids}

    def warm_start(self, classifiers: Mapping[str, Linear]) -> None:
        """Initialise the output classifier from the pre-trained stream classifiers.

        map-X copies stream X's classifier (its input space is exactly C_X);
        concat stacks every stream's rows scaled by 1/J, i.e. the ensemble
        average of the stream logits. map-all has no matching space and is left as is.
        """
        if self.kind == "map-all":
            return
        sources = [self.anchor] if self.anchor is not None else self.ids
        missing = [j for j in sources if j not in classifiers]
        if missing:
            raise ValueError(f"no pre-trained classifier for streams {missing}")
        for j in sources:
            c = classifiers[j]
            if c.n_in != self.widths[j] or c.n_out != self.classifier.n_out:
                raise ValueError(f"stream {j} classifier is {c.n_in}x{c.n_out}, "
                                 f"expected {self.widths[j]}x{self.classifier.n_out}")
        scale = 1.0 / len(sources)
        w = np.concatenate([classifiers[j].weight.data * scale for j in sources], axis=0)
        self.classifier.weight = Parameter(w)
        if self.classifier.has_bias:
            self.classifier.bias = Parameter(sum(
                classifiers[j].bias.data if classifiers[j].has_bias else 0.0 for j in sources) * scale)

    def learnable_maps(self) -> list[str]:
        return [j for j, w in self.maps.items() if w is not None]

    def combine(self, features: Mapping[str, Tensor]) -> Tensor:
        return combine_concat(features, self.ids) if self.kind == "concat" else combine_ws(self, features)

    def forward(self, features):
        return self.classifier(self.combine(features))


def _check_features(bundle: StreamBundle, features: Mapping[str, Tensor]) -> None:
    missing = [j for j in bundle.ids if j not in features]
    if missing:
        raise ValueError(f"features missing for streams {missing}")
    for j in bundle.ids:
        if features[j].shape[1] != bundle.widths[j]:
            raise ValueError(f"stream {j} has width {features[j].shape[1]}, bundle expects {bundle.widths[j]}")


def combine_ws(bundle: StreamBundle, features: Mapping[str, Tensor]) -> Tensor:
    """sum_j norm(w)_j * (W_j x_j) with weights normalised per channel."""
    _check_features(bundle, features)
    norm = bundle.normalized_weights()
    out = None
    for j in bundle.ids:
        x = features[j] if isinstance(features[j], Tensor) else Tensor(features[j])
        w = bundle.maps[j]
        mapped = x if w is None else matmul(x, transpose(w))
        term = mapped * norm[j]
        out = term if out is None else out + term
    return out


def combine_concat(features: Mapping[str, Tensor], ids=None) -> Tensor:
    """Channel concatenation in the fixed order e2, scale, std."""
    ids = ordered_ids(features) if ids is None else list(ids)
    parts = [features[j] if isinstance(features[j], Tensor) else Tensor(features[j]) for j in ids]
    return parts[0] if len(parts) == 1 else concat(parts, axis=1)


def head_variant(kind: str, widths: Mapping[str, int], n_classes: int, c_map: int | None = None,
                 rng: np.random.Generator | None = None) -> StreamBundle:
    return StreamBundle(widths, kind, n_classes, c_map, rng)


class MultiStreamModel(Module):
    """Stream bodies (image -> invariant features) joined by a StreamBundle."""

    def __init__(self, streams: Mapping[str, Module], bundle: StreamBundle):
        super().__init__()
        self.stream_ids = ordered_ids(streams)
        for j in self.stream_ids:
            setattr(self, f"stream_{j}", streams[j])
        self.bundle = bundle

    def stream(self, j: str) -> Module:
        return getattr(self, f"stream_{j}")

    def features(self, x) -> dict[str, Tensor]:
        return {j: self.stream(j)(x) for j in self.stream_ids}

    def forward(self, x):
        return self.bundle(self.features(x))

    def trace_layers(self):
        return []


class _FeatureHead(Module):
    """Adapter so the generic loop can train a bundle on cached, concatenated features."""

    def __init__(self, bundle: StreamBundle):
        super().__init__()
        self.bundle = bundle
        self.bounds = np.cumsum([0] + [bundle.widths[j] for j in bundle.ids])

    def forward(self, x):
        feats = {j: x[:, int(a):int(b)] for j, a, b in zip(self.bundle.ids, self.bounds[:-1], self.bounds[1:])}
        return self.bundle(feats)


def stream_features(streams: Mapping[str, Module], images: np.ndarray, batch_size: int = 200) -> np.ndarray:
    """Frozen (eval-mode) stream features concatenated in stream order."""
    ids = ordered_ids(streams)
    blocks = []
    with no_grad():
        for j in ids:
            streams[j].eval()
            outs = [streams[j](Tensor(images[i:i + batch_size])).data for i in range(0, len(images), batch_size)]
            blocks.append(np.concatenate(outs, axis=0))
    return np.concatenate(blocks, axis=1)


def head_config(cfg: TrainConfig, divisor: int = 4) -> TrainConfig:
    """Head schedule: epochs and epoch milestones divided by ``divisor``."""
    epochs = max(1, cfg.epochs // divisor)
    milestones = tuple(sorted({max(1, m // divisor) for m in cfg.milestones if m // divisor < epochs}))
    return replace(cfg, epochs=epochs, milestones=milestones, augment_scale=None, pruning_schedule=())


def load_streams(paths: Mapping[str, str | Path]) -> dict[str, Network]:
    out = {}
    for j in ordered_ids(paths):
        p = Path(paths[j])
        if not p.exists():
            raise FileNotFoundError(f"stream checkpoint {p} is missing")
        out[j] = load_network(p)[0]
    return out


def stream_classifier(net: Network) -> Linear | None:
    """The stream's classifier when its head is a single dense layer, else None."""
    layers = net.head.layers()
    if len(layers) == 1 and isinstance(layers[0][1], Linear):
        return layers[0][1]
    return None


def staged_train(bundle: StreamBundle, streams: Mapping[str, Network], dataset, cfg: TrainConfig,
                 eval_set=None, end_to_end: bool = False,
                 warm_start: bool = False) -> tuple[MultiStreamModel, TrainResult]:
    """Train the combination head on frozen, pre-trained stream bodies.

    Frozen bodies run in eval mode and never change, so their features are
    computed once and cached. With ``end_to_end`` every parameter (streams and
    head) is trained jointly from whatever initialisation the streams have.
    ``warm_start`` seeds the output classifier from the streams' own
    single-layer classifiers (see StreamBundle.warm_start).
    """
    if warm_start:
        found = {j: stream_classifier(n) for j, n in streams.items()}
        bundle.warm_start({j: c for j, c in found.items() if c is not None})
    bodies = {j: streams[j].body for j in ordered_ids(streams)}
    model = MultiStreamModel(bodies, bundle)
    if end_to_end:
        eval_fn = (lambda m: test_error(m, eval_set)) if eval_set is not None else None
        return model, fit(model, dataset.images, dataset.labels, cfg, eval_fn)
    for body in bodies.values():
        body.eval()
        for p in body.parameters():
            p.requires_grad = False
    feats = stream_features(bodies, dataset.images)
    head = _FeatureHead(bundle)
    eval_fn = None
    if eval_set is not None:
        test_feats = stream_features(bodies, eval_set.images)

        def eval_fn(m):
            return float(100.0 * np.mean(predict(m, test_feats) != eval_set.labels))

    result = fit(head, feats, dataset.labels, cfg, eval_fn)
    return model, result


def save_combined(path, model: MultiStreamModel, stream_nets: Mapping[str, Network], cfg: TrainConfig,
                  metrics: list[dict] | None = None) -> None:
    """One file holding every stream checkpoint (arrays prefixed by stream id) plus the head."""
    arrays: dict[str, np.ndarray] = {}
    streams_meta = {}
    for j in model.stream_ids:
        net = stream_nets[j]
        for k, v in model_arrays(net).items():
            arrays[f"stream/{j}/{k}"] = v
        streams_meta[j] = {"arch": net.arch, "seed": net.seed, "monomials": net.monomial_state()}
    for k, v in model_arrays(model.bundle).items():
        arrays[f"head/{k}"] = v
    b = model.bundle
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "kind": "multistream",
        "streams": streams_meta,
        "head": {"kind": b.kind, "widths": b.widths, "c_map": b.c_map, "n_classes": b.classifier.n_out},
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "metrics": metrics or [],
    }
    save_checkpoint(path, arrays, header)


def load_combined(path) -> MultiStreamModel:
    arrays, header = load_checkpoint(path)
    if header.get("kind") != "multistream":
        raise ConfigError(f"{path} is not a multi-stream checkpoint")
    nets = {}
    for j, meta in header["streams"].items():
        net = build_model(meta["arch"], meta["seed"])
        net.restore_monomials(meta.get("monomials", {}))
        net.load_state_dict(model_state_from_arrays(arrays, f"stream/{j}/"), allow_resize=True)
        nets[j] = net
    h = header["head"]
    bundle = StreamBundle(h["widths"], h["kind"], h["n_classes"], h["c_map"])
    bundle.load_state_dict(model_state_from_arrays(arrays, "head/"))
    return MultiStreamModel({j: n.body for j, n in nets.items()}, bundle)


def constant_parameter_width(c: int, n_streams: int) -> int:
    """Channel width of one stream when J streams share a single stream's budget: ceil(C / sqrt(J))."""
    return int(np.ceil(c / np.sqrt(n_streams)))
