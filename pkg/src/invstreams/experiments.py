"""Reference architectures and the desk-scale experiment runners used by the CLI and acceptance tests."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import Dataset, subset_balanced, synth_generate
from .groups import DEFAULT_SCALE_BASE
from .invariant import ScaleMonomialII, ScaleWSII, random_monomial_pairs
from .layers import SpatialPool
from .metrics import invariance_error, mean_std, scale_grid, test_error, zoom_transforms
from .multistream import head_config, head_variant, staged_train
from .nn import Module
from .trainer import ConfigError, TrainConfig, build_model, train

DESK_WIDTHS = (8, 16, 24)
FULL_WIDTHS = (32, 63, 95)
II_LAYERS = {
    "scale-ii-ws": {"type": "scale_ws_ii"},
    "scale-ii-monomial": {"type": "scale_monomial_ii", "pairs": 25, "radius": 1},
    "avg-pool": {"type": "pool", "mode": "avg"},
    "mixed-pool": {"type": "pool", "mode": "mixed"},
}


# -- architectures --------------------------------------------------------------------

def scale_arch(invariant: str = "scale-ii-ws", widths=DESK_WIDTHS, n_scale: int = 3, dense: int = 64,
               dropout: float = 0.1, upsample: bool = False, size: int = 28, n_classes: int = 10,
               scale_base: float = DEFAULT_SCALE_BASE, classifier_only: bool = False) -> dict:
    """Three scale convolutions with max pools, scale max-projection, an invariant layer and a dense head."""
    group = {"kind": "scale", "n_scale": n_scale, "scale_base": scale_base}
    layers = [{"type": "upsample", "factor": 2}] if upsample else []
    c1, c2, c3 = widths
    layers += [
        {"type": "lift", "group": group, "channels": c1, "name": "lift"},
        {"type": "bn"}, {"type": "relu"}, {"type": "maxpool"},
        {"type": "gconv", "channels": c2, "name": "conv1"},
        {"type": "bn"}, {"type": "relu"}, {"type": "maxpool"},
        {"type": "gconv", "channels": c3, "name": "conv2"},
        {"type": "bn"}, {"type": "relu"},
        {"type": "group_max", "name": "maxproj"},
        dict(II_LAYERS[invariant], name="invariant"),
    ]
    layers += _head(dense, dropout, n_classes, classifier_only)
    return {"input_shape": [1, size, size], "n_classes": n_classes, "layers": layers}


def e2_arch(widths=(8, 12, 16), n_rot: int = 4, dense: int = 64, dropout: float = 0.1, size: int = 28,
            n_classes: int = 10, classifier_only: bool = False) -> dict:
    """Rotation-flip group convolutions followed by a weighted-sum II over rotations and flips."""
    group = {"kind": "rotation-flip", "n_rot": n_rot, "n_flip": 2}
    c1, c2, c3 = widths
    layers = [
        {"type": "lift", "group": group, "channels": c1, "name": "lift"},
        {"type": "bn"}, {"type": "relu"}, {"type": "maxpool"},
        {"type": "gconv", "channels": c2, "name": "conv1"},
        {"type": "bn"}, {"type": "relu"}, {"type": "maxpool"},
        {"type": "gconv", "channels": c3, "name": "conv2"},
        {"type": "bn"}, {"type": "relu"},
        {"type": "group_max", "name": "maxproj"},
        {"type": "ws_ii", "n_rot": n_rot, "n_flip": 2, "name": "invariant"},
    ]
    layers += _head(dense, dropout, n_classes, classifier_only)
    return {"input_shape": [1, size, size], "n_classes": n_classes, "layers": layers}


def std_arch(widths=(8, 16, 24), dense: int = 64, dropout: float = 0.1, size: int = 28, n_classes: int = 10,
             classifier_only: bool = False) -> dict:
    """Plain convolutions with global average pooling."""
    c1, c2, c3 = widths
    layers = [
        {"type": "conv", "channels": c1, "name": "conv0"}, {"type": "bn"}, {"type": "relu"}, {"type": "maxpool"},
        {"type": "conv", "channels": c2, "name": "conv1"}, {"type": "bn"}, {"type": "relu"}, {"type": "maxpool"},
        {"type": "conv", "channels": c3, "name": "conv2"}, {"type": "bn"}, {"type": "relu"},
        {"type": "pool", "mode": "avg", "name": "invariant"},
    ]
    layers += _head(dense, dropout, n_classes, classifier_only)
    return {"input_shape": [1, size, size], "n_classes": n_classes, "layers": layers}


PRESETS = {"scale": scale_arch, "e2": e2_arch, "std": std_arch}


def resolve_arch(spec: dict) -> dict:
    """Expand ``{"preset": name, **kwargs}`` into a full layer list; full specs pass through.

    ``"widths": "full"`` selects the full-size widths for the scale preset.
    """
    if "preset" not in spec:
        return spec
    kwargs = dict(spec)
    name = kwargs.pop("preset")
    if name not in PRESETS:
        raise ConfigError(f"unknown architecture preset {name!r}; expected one of {sorted(PRESETS)}")
    if kwargs.get("widths") == "full":
        kwargs["widths"] = FULL_WIDTHS
    try:
        return PRESETS[name](**kwargs)
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"bad arguments for preset {name!r}: {exc}") from None


def _head(dense: int, dropout: float, n_classes: int, classifier_only: bool) -> list[dict]:
    """BN after the invariant layer (part of the feature vector), then the classifier."""
    if classifier_only:
        return [{"type": "bn", "name": "feature_bn", "features": True},
                {"type": "dense", "units": n_classes, "name": "classifier"}]
    return [
        {"type": "bn", "name": "feature_bn", "features": True},
        {"type": "dense", "units": dense, "name": "dense1"}, {"type": "bn"}, {"type": "relu"},
        {"type": "dropout", "rate": dropout},
        {"type": "dense", "units": n_classes, "name": "dense2"},
    ]


# -- result files -----------------------------------------------------------------------

def write_results(out_dir, name: str, result: dict, rows: list[dict] | None = None) -> list[Path]:
    """``name.json`` (sorted keys, repr floats) plus ``name.csv`` when rows are given."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{name}.json"]
    paths[0].write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    if rows:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        paths.append(out / f"{name}.csv")
        paths[1].write_text(buf.getvalue())
    return paths


def _test_set(nuisances: str, n: int = 1000, size: int = 28) -> Dataset:
    return synth_generate(n, nuisances, seed=9999, size=size, split="test")


def _train_pool(nuisances: str, n: int, size: int = 28) -> Dataset:
    return synth_generate(n, nuisances, seed=1234, size=size)


# -- invariance error of single layers and random networks -----------------------------------

def invariance_table(n_samples: int = 100, grid=(0.5, 1.0, 0.05), seed: int = 0, cnn: bool = True) -> dict:
    """Delta of each scale-invariant reduction on raw images and inside a random scale CNN."""
    data = synth_generate(n_samples, "scale", seed=seed)
    transforms = zoom_transforms(scale_grid(*grid))
    rng = np.random.default_rng([seed, 17])
    direct = {
        "scale-ii-ws": ScaleWSII(1, 8, 3, rng=rng),
        "scale-ii-monomial": ScaleMonomialII(1, random_monomial_pairs(25, rng, radius=1, max_order=3)),
        "avg-pool": SpatialPool("avg"),
        "mixed-pool": SpatialPool("mixed"),
    }
    rows = []
    for name, layer in direct.items():
        rep = invariance_error(layer, data.images, transforms)
        row = {"layer": name, "input": rep.delta, "input_median": float(np.median(rep.errors)),
               "input_skipped": rep.n_skipped}
        if cnn:
            net = build_model(scale_arch(name), seed)
            crep = invariance_error(net.upto("invariant"), data.images, transforms)
            row.update(cnn=crep.delta, cnn_median=float(np.median(crep.errors)), cnn_skipped=crep.n_skipped)
        rows.append(row)
    result = {"experiment": "invariance-table", "n_samples": n_samples, "grid": list(grid), "seed": seed,
              "rows": rows}
    return result


# -- sample complexity: II vs pooling ------------------------------------------------------

def sample_complexity_config(epochs: int = 16, seed: int = 0) -> TrainConfig:
    return TrainConfig(optimizer="adam", lr=5e-3, weight_decay=5e-7, batch_size=32, epochs=epochs,
                       milestones=(epochs * 2 // 3,), seed=seed, augment_scale=(0.5, 1.0))


def sample_complexity(n_train: int = 500, seeds=(0, 1, 2), invariants=("scale-ii-ws", "mixed-pool"),
                      epochs: int = 16, n_test: int = 1000, n_delta: int = 100, grid=(0.5, 1.0, 0.05),
                      log=None) -> dict:
    """Train the thinned scale CNN with each invariant layer on a balanced subset; report TE and Delta."""
    pool = _train_pool("scale", max(2000, n_train))
    test = _test_set("scale", n_test)
    transforms = zoom_transforms(scale_grid(*grid))
    rows = []
    for inv in invariants:
        for seed in seeds:
            train_set = subset_balanced(pool, n_train, seed)
            cfg = replace(sample_complexity_config(epochs, seed), arch=scale_arch(inv))
            net = build_model(cfg.arch, seed)
            res = train(net, train_set, cfg)
            te = test_error(net, test)
            delta = invariance_error(net.upto("invariant"), test.images[:n_delta], transforms).delta
            rows.append({"invariant": inv, "seed": seed, "n_train": n_train, "test_error": te, "delta": delta,
                         "final_train_loss": res.metrics[-1]["train_loss"] if res.metrics else float("nan")})
            if log:
                log(f"{inv} seed={seed}: TE={te:.2f}% delta={delta:.3e}")
    summary = {}
    for inv in invariants:
        sel = [r for r in rows if r["invariant"] == inv]
        te_m, te_s = mean_std([r["test_error"] for r in sel])
        d_m, d_s = mean_std([r["delta"] for r in sel])
        summary[inv] = {"test_error_mean": te_m, "test_error_std": te_s, "delta_mean": d_m, "delta_std": d_s}
    return {"experiment": "sample-complexity", "n_train": n_train, "seeds": list(seeds), "epochs": epochs,
            "n_test": n_test, "rows": rows, "summary": summary}


# -- multi-stream on rotation + scale nuisances -------------------------------------------

def stream_archs() -> dict[str, dict]:
    return {"e2": e2_arch(classifier_only=True), "scale": scale_arch("scale-ii-ws", classifier_only=True)}


def multistream_config(epochs: int = 10, seed: int = 0) -> TrainConfig:
    return TrainConfig(optimizer="adam", lr=5e-3, weight_decay=5e-7, batch_size=32, epochs=epochs,
                       milestones=(epochs * 3 // 4,), seed=seed)


def multistream(n_train: int = 1000, seeds=(0, 1, 2), epochs: int = 10, heads=("map-e2", "concat"),
                n_test: int = 1000, log=None) -> dict:
    """Single streams, then staged heads on the frozen streams, on data with both nuisances."""
    pool = _train_pool("both", max(2000, n_train))
    test = _test_set("both", n_test)
    rows = []
    for seed in seeds:
        train_set = subset_balanced(pool, n_train, seed)
        nets = {}
        row: dict = {"seed": seed, "n_train": n_train}
        for j, arch in stream_archs().items():
            cfg = replace(multistream_config(epochs, seed), arch=arch)
            nets[j] = build_model(arch, seed)
            train(nets[j], train_set, cfg)
            row[f"te_{j}"] = test_error(nets[j], test)
            if log:
                log(f"seed={seed} stream {j}: TE={row[f'te_{j}']:.2f}%")
        widths = {j: n.feature_width for j, n in nets.items()}
        hcfg = head_config(multistream_config(epochs, seed))
        for kind in heads:
            bundle = head_variant(kind, widths, test.n_classes, rng=np.random.default_rng([seed, 5]))
            model, _ = staged_train(bundle, nets, train_set, hcfg, warm_start=True)
            row[f"te_{kind}"] = test_error(model, test)
            if kind != "concat":
                total = sum(w.data for w in bundle.normalized_weights().values())
                row[f"weight_sum_err_{kind}"] = float(np.max(np.abs(total - 1.0)))
            if log:
                log(f"seed={seed} head {kind}: TE={row[f'te_{kind}']:.2f}%")
        rows.append(row)
    keys = [k for k in rows[0] if k.startswith("te_")]
    summary = {k: dict(zip(("mean", "std"), mean_std([r[k] for r in rows]))) for k in keys}
    return {"experiment": "multistream", "n_train": n_train, "seeds": list(seeds), "epochs": epochs,
            "head_epochs": head_config(multistream_config(epochs)).epochs, "n_test": n_test,
            "rows": rows, "summary": summary}
