"""Command-line entry point: train, invariance, sweep, combine, experiment and replay.

Every command writes ``manifest.json`` next to its outputs; ``replay`` re-runs a
manifest after checking that its input files are unchanged.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import experiments
from .autodiff import ShapeError
from .checkpoint import CheckpointError
from .data import Dataset, IdxFormatError, load_idx, subset_balanced, synth_generate
from .invariant import ScaleMonomialII, ScaleWSII, WSRotationII, random_monomial_pairs
from .layers import SpatialPool
from .metrics import invariance_error, mean_std, scale_grid, test_error, zoom_transforms
from .multistream import (
    HEAD_KINDS,
    head_config,
    head_variant,
    load_streams,
    save_combined,
    staged_train,
)
from .trainer import (
    ConfigError,
    TrainConfig,
    build_model,
    canonical_json,
    load_network,
    metrics_csv,
    save_network,
    train,
)

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
USER_ERRORS = (ConfigError, ShapeError, CheckpointError, IdxFormatError, FileNotFoundError, ValueError, KeyError)
TOP_LEVEL_KEYS = {"data", "train", "head"}
LAYERS = ("scale-ii-ws", "scale-ii-monomial", "avg-pool", "mixed-pool", "max-pool")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- manifests ------------------------------------------------------------------------------

def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config_path: str | None
    config: dict
    seeds: list[int]
    out: str
    inputs: dict[str, str] = field(default_factory=dict)  # path -> sha256

    @property
    def content_hash(self) -> str:
        payload = {"command": self.command, "config": self.config, "seeds": self.seeds,
                   "inputs": sorted(self.inputs.values())}
        return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        return {"command": self.command, "argv": self.argv, "config_path": self.config_path,
                "config": self.config, "seeds": self.seeds, "out": self.out, "inputs": self.inputs,
                "content_hash": self.content_hash}

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        try:
            d = json.loads(Path(path).read_text())
            return cls(d["command"], list(d["argv"]), d.get("config_path"), d["config"], list(d["seeds"]),
                       d["out"], dict(d.get("inputs", {})))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigError(f"{path} is not a run manifest ({exc})") from None


def _manifest(args, config: dict, seeds, inputs=()) -> RunManifest:
    cfg_path = getattr(args, "config", None)
    files = [p for p in ([cfg_path] if cfg_path else []) + list(inputs)]
    return RunManifest(args.command, list(args.argv), cfg_path, config, [int(s) for s in seeds], str(args.out),
                       {str(p): _file_digest(p) for p in files})


# -- config and data --------------------------------------------------------------------------

def parse_grid(spec: str) -> list[float]:
    """``start:stop:step`` inclusive of the end point within 1e-9."""
    parts = spec.split(":")
    if len(parts) != 3:
        raise ConfigError(f"grid {spec!r} must look like start:stop:step")
    try:
        start, stop, step = (float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"grid {spec!r} has a non-numeric field") from None
    if stop < start:
        raise ConfigError(f"grid {spec!r} ends before it starts")
    return scale_grid(start, stop, step)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from None


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config {path} does not exist")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(cfg) - TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown top-level keys {sorted(unknown)}")
    if "train" not in cfg:
        raise ConfigError(f"{path}: missing 'train' section")
    return cfg


def train_config(cfg: dict, seed: int) -> TrainConfig:
    section = dict(cfg["train"])
    section["arch"] = experiments.resolve_arch(dict(section.get("arch") or {}))
    section["seed"] = seed
    return TrainConfig.from_dict(section)


DATA_DEFAULTS = {"source": "synth", "nuisances": "scale", "n": 2000, "seed": 1234, "size": 28,
                 "n_train": None, "test_n": 1000, "test_seed": 9999}


def load_data(section: dict | None, seed: int, n_train: int | None = None) -> tuple[Dataset, Dataset]:
    """Training set (balanced subset chosen by ``seed`` when n_train is set) and test set."""
    d = dict(section or {})
    source = d.get("source", "synth")
    if source == "synth":
        unknown = set(d) - set(DATA_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown data keys {sorted(unknown)}")
        d = {**DATA_DEFAULTS, **d}
        pool = synth_generate(int(d["n"]), d["nuisances"], int(d["seed"]), int(d["size"]))
        test = synth_generate(int(d["test_n"]), d["nuisances"], int(d["test_seed"]), int(d["size"]), split="test")
    elif source == "idx":
        try:
            pool = load_idx(d["train_images"], d["train_labels"])
            test = load_idx(d["test_images"], d["test_labels"], split="test")
        except KeyError as exc:
            raise ConfigError(f"idx data needs {exc}") from None
    else:
        raise ConfigError(f"unknown data source {source!r}")
    n_train = n_train if n_train is not None else d.get("n_train")
    if n_train is not None:
        pool = subset_balanced(pool, int(n_train), seed)
    return pool, test


def _data_inputs(section: dict | None) -> list[str]:
    d = section or {}
    if d.get("source") == "idx":
        return [d[k] for k in ("train_images", "train_labels", "test_images", "test_labels") if k in d]
    return []


def _prepare_out(out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands ----------------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    tcfg = train_config(cfg, args.seed)
    train_set, test_set = load_data(cfg.get("data"), args.seed)
    model = build_model(tcfg.arch, args.seed, tcfg.dropout)
    out = _prepare_out(args.out)
    manifest = _manifest(args, {"config": cfg, "train": tcfg.to_dict()}, [args.seed], _data_inputs(cfg.get("data")))
    result = train(model, train_set, tcfg, eval_set=test_set, metrics_path=out / "metrics.csv",
                   checkpoint_path=out / "model.ckpt")
    if not (out / "model.ckpt").exists():  # zero epochs still leave a checkpoint
        save_network(out / "model.ckpt", model, tcfg, None, 0, [])
        (out / "metrics.csv").write_text(metrics_csv([]))
    te = test_error(model, test_set)
    _write_json(out / "result.json", {"test_error": te, "epochs": result.epochs_done, "seed": args.seed,
                                      "config_hash": tcfg.hash()})
    manifest.write(out)
    print(f"test error {te:.2f}% after {result.epochs_done} epochs; artifacts in {out}")
    return EXIT_OK


def _direct_layer(name: str, seed: int):
    rng = np.random.default_rng([seed, 17])
    if name == "scale-ii-ws":
        return ScaleWSII(1, 8, 3, rng=rng)
    if name == "scale-ii-monomial":
        return ScaleMonomialII(1, random_monomial_pairs(25, rng, radius=1, max_order=3))
    if name == "e2-ii-ws":
        return WSRotationII(1, 3, 4, 2, rng=rng)
    return SpatialPool(name.split("-")[0])


def cmd_invariance(args) -> int:
    grid = parse_grid(args.grid)
    inputs = []
    size = args.size or 28
    if args.model:
        net = load_network(args.model)[0]
        size = args.size or int(net.arch["input_shape"][-1])
        names = [n for n, _ in net.body.layers()]
        at = args.at or ("invariant" if "invariant" in names else names[-1])
        psi = net.upto(at)
        inputs.append(args.model)
        what = {"model": args.model, "at": at}
    else:
        psi = _direct_layer(args.layer, args.seed)
        what = {"layer": args.layer}
    samples = synth_generate(args.samples, args.nuisances, args.seed, size).images
    out = _prepare_out(args.out)
    config = {**what, "grid": args.grid, "samples": args.samples, "nuisances": args.nuisances, "size": size}
    manifest = _manifest(args, config, [args.seed], inputs)
    report = invariance_error(psi, samples, zoom_transforms(grid))
    report.meta = {**what, "grid": grid, "seed": args.seed}
    (out / "invariance.json").write_text(report.to_json())
    (out / "invariance.csv").write_text(report.to_csv())
    manifest.write(out)
    print(f"delta = {report.delta:.6e} over {len(grid)} scales and {report.errors.shape[1]} samples "
          f"({report.n_skipped} skipped)")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    sizes, seeds = sorted(set(_int_list(args.sizes))), _int_list(args.seeds)
    if not sizes or not seeds:
        raise ConfigError("sweep needs at least one size and one seed")
    for s in seeds:
        train_config(cfg, s)  # validate before any work
    out = _prepare_out(args.out)
    manifest = _manifest(args, {"config": cfg, "sizes": sizes}, seeds, _data_inputs(cfg.get("data")))
    cells = []
    for size in sizes:
        for seed in seeds:
            tcfg = train_config(cfg, seed)
            train_set, test_set = load_data(cfg.get("data"), seed, n_train=size)
            model = build_model(tcfg.arch, seed, tcfg.dropout)
            train(model, train_set, tcfg)
            cells.append({"size": size, "seed": seed, "test_error": test_error(model, test_set)})
            print(f"size={size} seed={seed}: TE={cells[-1]['test_error']:.2f}%")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["size", "mean_test_error", "std_test_error", "n_seeds"])
    for size in sizes:
        m, s = mean_std([c["test_error"] for c in cells if c["size"] == size])
        w.writerow([size, repr(m), repr(s), len(seeds)])
    (out / "sweep.csv").write_text(buf.getvalue())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["size", "seed", "test_error"])
    for c in cells:
        w.writerow([c["size"], c["seed"], repr(c["test_error"])])
    (out / "cells.csv").write_text(buf.getvalue())
    manifest.write(out)
    return EXIT_OK


def _parse_streams(items: list[str]) -> dict[str, str]:
    streams = {}
    for item in items:
        for part in item.split(","):
            if "=" not in part:
                raise ConfigError(f"stream {part!r} must look like id=PATH")
            j, p = part.split("=", 1)
            streams[j.strip()] = p.strip()
    return streams


HEAD_DEFAULTS = {"c_map": None, "divisor": 4, "warm_start": True, "end_to_end": False}


def cmd_combine(args) -> int:
    cfg = load_config(args.config)
    head = {**HEAD_DEFAULTS, **cfg.get("head", {})}
    unknown = set(head) - set(HEAD_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown head keys {sorted(unknown)}")
    paths = _parse_streams(args.streams)
    nets = load_streams(paths)
    tcfg = train_config(cfg, args.seed)
    hcfg = tcfg if head["end_to_end"] else head_config(tcfg, int(head["divisor"]))
    train_set, test_set = load_data(cfg.get("data"), args.seed)
    widths = {j: n.feature_width for j, n in nets.items()}
    bundle = head_variant(args.head, widths, test_set.n_classes, head["c_map"], np.random.default_rng([args.seed, 5]))
    out = _prepare_out(args.out)
    manifest = _manifest(args, {"config": cfg, "head_kind": args.head, "train": hcfg.to_dict()}, [args.seed],
                         list(paths.values()) + _data_inputs(cfg.get("data")))
    model, result = staged_train(bundle, nets, train_set, hcfg, end_to_end=bool(head["end_to_end"]),
                                 warm_start=bool(head["warm_start"]))
    te = test_error(model, test_set)
    (out / "metrics.csv").write_text(metrics_csv(result.metrics))
    save_combined(out / "combined.ckpt", model, nets, hcfg, result.metrics)
    report = {"head": args.head, "test_error": te, "streams": sorted(paths),
              "stream_test_errors": {j: test_error(n, test_set) for j, n in nets.items()}}
    if args.head != "concat":
        total = sum(w.data for w in bundle.normalized_weights().values())
        report["weight_sum_max_error"] = float(np.max(np.abs(total - 1.0)))
    _write_json(out / "result.json", report)
    manifest.write(out)
    print(f"{args.head}: test error {te:.2f}%")
    return EXIT_OK


def cmd_experiment(args) -> int:
    out = _prepare_out(args.out)
    seeds = _int_list(args.seeds)
    manifest = _manifest(args, {"name": args.name, "epochs": args.epochs}, seeds)
    log = print if args.verbose else None
    if args.name == "invariance-table":
        result = experiments.invariance_table(seed=seeds[0])
    elif args.name == "sample-complexity":
        kw = {"epochs": args.epochs} if args.epochs else {}
        result = experiments.sample_complexity(seeds=tuple(seeds), log=log, **kw)
    else:
        kw = {"epochs": args.epochs} if args.epochs else {}
        result = experiments.multistream(seeds=tuple(seeds), log=log, **kw)
    experiments.write_results(out, args.name, result, result.get("rows"))
    manifest.write(out)
    print(json.dumps(result.get("summary", result.get("rows")), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_replay(args) -> int:
    manifest = RunManifest.read(args.manifest)
    for path, digest in manifest.inputs.items():
        if not Path(path).exists():
            raise FileNotFoundError(f"manifest input {path} is missing")
        if _file_digest(path) != digest:
            raise ConfigError(f"manifest input {path} changed since the run")
    argv = list(manifest.argv)
    if args.out:
        i = argv.index("--out")
        argv[i + 1] = args.out
    return main(argv)


# -- wiring --------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="invstreams", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train one network from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)

    v = sub.add_parser("invariance", help="invariance error of a layer or a trained model under zooms")
    src = v.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--layer", choices=LAYERS + ("e2-ii-ws",))
    v.add_argument("--at", help="body layer to measure a model at (default: 'invariant')")
    v.add_argument("--grid", default="0.5:1.0:0.05")
    v.add_argument("--samples", type=int, default=100)
    v.add_argument("--size", type=int, default=None, help="image size (default: the model's input, else 28)")
    v.add_argument("--nuisances", default="scale", choices=("none", "rotation", "scale", "both"))
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", required=True)

    s = sub.add_parser("sweep", help="test error over training-set sizes and seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--sizes", required=True)
    s.add_argument("--seeds", default="0")
    s.add_argument("--out", required=True)

    c = sub.add_parser("combine", help="train a multi-stream head on frozen stream checkpoints")
    c.add_argument("--streams", nargs="+", required=True, help="id=PATH pairs, e.g. e2=a.ckpt scale=b.ckpt")
    c.add_argument("--head", required=True, choices=HEAD_KINDS)
    c.add_argument("--config", required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)

    e = sub.add_parser("experiment", help="run a packaged desk-scale experiment")
    e.add_argument("name", choices=("invariance-table", "sample-complexity", "multistream"))
    e.add_argument("--seeds", default="0,1,2")
    e.add_argument("--epochs", type=int, default=None)
    e.add_argument("--out", required=True)
    e.add_argument("--verbose", action="store_true")

    r = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    r.add_argument("manifest")
    r.add_argument("--out")
    return p


COMMANDS = {"train": cmd_train, "invariance": cmd_invariance, "sweep": cmd_sweep, "combine": cmd_combine,
            "experiment": cmd_experiment, "replay": cmd_replay}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        args.argv = argv
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"invstreams: usage error: {exc}", file=sys.stderr)
        return EXIT_USER
    except USER_ERRORS as exc:
        print(f"invstreams: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001
        print(f"invstreams: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
