"""Command-line entry point.

Subcommands: gen-data, train, search, latency-campaign, fit-predictor,
bench, eval. Every run resolves its options (defaults, then an optional
--config file, then explicit flags), writes the resolved dict as
config.snapshot next to its outputs, and is deterministic given that
snapshot. Exit codes: 0 success, 2 configuration error, 3 infeasible
constraint, 4 file/format error, 1 other failure.
"""

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import bench as bench_mod
from . import nas
from .checkpoint import load_checkpoint, save_checkpoint
from .cloud import SceneConfig
from .errors import (ConfigError, FileFormatError, InfeasibleConstraintError,
                     PointVoxelError)
from .models import ModelConfig, SegmentationModel, BlockSpec
from .optim import make_optimizer
from .train import evaluate_model, generate_dataset, load_dataset, train_model, train_supernet

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4


def _resolve(defaults, config_path, provided):
    resolved = dict(defaults)
    if config_path:
        with open(config_path) as fh:
            loaded = json.load(fh)
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(loaded)
    resolved.update({k: v for k, v in provided.items() if v is not None and k in defaults})
    return resolved


def _write_snapshot(out_dir, resolved):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.snapshot", "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)


def _write_metrics(out_dir, rows):
    if not rows:
        return
    keys = []
    for row in rows:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(Path(out_dir) / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (json.dumps(v) if isinstance(v, list) else v)
                             for k, v in row.items()})


def _parse_primitives(spec):
    primitives = {}
    for item in spec.split(","):
        item = item.strip()
        if not item:
            continue
        if ":" in item:
            kind, count = item.split(":", 1)
            primitives[kind.strip()] = int(count)
        else:
            primitives[item] = 1
    return primitives


# ---------------------------------------------------------------------------
# gen-data

GEN_DEFAULTS = {
    "out": None, "scenes": 200, "seed": 0,
    "classes": "plane:1,sphere:2,box:2,pole:3",
    "extent": 10.0, "split": "8:1:1", "force": False,
}


def cmd_gen_data(args):
    resolved = _resolve(GEN_DEFAULTS, args.config, vars(args))
    if not resolved["out"]:
        raise ConfigError("gen-data needs --out")
    split = tuple(int(x) for x in str(resolved["split"]).split(":"))
    config = SceneConfig(primitives=_parse_primitives(resolved["classes"]),
                         extent=float(resolved["extent"]))
    meta = generate_dataset(resolved["out"], int(resolved["scenes"]), int(resolved["seed"]),
                            config, split=split, force=bool(resolved["force"]))
    _write_snapshot(resolved["out"], resolved)
    print(f"wrote {meta['num_scenes']} scenes to {resolved['out']} "
          f"(classes: {', '.join(meta['classes'])})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

TRAIN_DEFAULTS = {
    "data": None, "out": None, "model": "pvcnn", "channels": "16,32,64",
    "resolution": 8, "voxel_size": 0.05, "classifier_hidden": "64",
    "epochs": 5, "lr": 0.01, "optimizer": "adam", "momentum": 0.9,
    "batch_scenes": 1, "seed": 0, "resume": None,
    "supernet": False, "space": None, "candidates": 2, "shrink": True,
    "model_config": None,
}


def _model_config_from_resolved(resolved, num_classes, in_channels=3):
    if resolved["model_config"]:
        with open(resolved["model_config"]) as fh:
            return ModelConfig.from_dict(json.load(fh))
    channels = [int(c) for c in str(resolved["channels"]).split(",") if c]
    kind = resolved["model"]
    blocks = []
    for c in channels:
        blocks.append(BlockSpec(
            out_channels=c,
            resolution=int(resolved["resolution"]) if kind == "pvcnn" else None,
            voxel_size=float(resolved["voxel_size"]) if kind == "spvcnn" else None,
        ))
    hidden = tuple(int(x) for x in str(resolved["classifier_hidden"]).split(",") if x)
    return ModelConfig(kind=kind, in_channels=in_channels, num_classes=num_classes,
                       blocks=blocks, classifier_hidden=hidden)


def cmd_train(args):
    resolved = _resolve(TRAIN_DEFAULTS, args.config, vars(args))
    if not resolved["data"] or not resolved["out"]:
        raise ConfigError("train needs --data and --out")
    data, meta = load_dataset(resolved["data"])
    num_classes = len(meta["classes"])
    out = Path(resolved["out"])
    _write_snapshot(out, resolved)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    log_path = out / "logs" / "train.log"
    optimizer = make_optimizer({"kind": resolved["optimizer"], "lr": float(resolved["lr"]),
                                "momentum": float(resolved["momentum"])})

    rows = []
    with open(log_path, "w") as log_fh:
        def log_fn(row):
            rows.append(row)
            log_fh.write(json.dumps(row) + "\n")
            print(" ".join(f"{k}={v}" for k, v in row.items()
                           if not isinstance(v, list)))

        if resolved["supernet"]:
            if not resolved["space"]:
                raise ConfigError("supernet training needs --space")
            with open(resolved["space"]) as fh:
                space = nas.SearchSpace.from_dict(json.load(fh))
            if space.num_classes != num_classes:
                raise ConfigError(
                    f"search space expects {space.num_classes} classes, dataset has {num_classes}")
            supernet = nas.SuperNet(space, seed=int(resolved["seed"]))
            train_supernet(supernet, data["train"], int(resolved["epochs"]), optimizer,
                           seed=int(resolved["seed"]),
                           num_candidates=int(resolved["candidates"]),
                           batch_scenes=int(resolved["batch_scenes"]),
                           shrink=bool(resolved["shrink"]), log_fn=log_fn)
            arrays = dict(supernet.store)
            arrays["_epochs_done"] = np.asarray([int(resolved["epochs"])], dtype=np.int64)
            save_checkpoint(out / "checkpoints" / "supernet.ckpt", arrays)
            with open(out / "space.json", "w") as fh:
                json.dump(space.to_dict(), fh, indent=2)
        else:
            model_config = _model_config_from_resolved(resolved, num_classes)
            if model_config.num_classes != num_classes:
                raise ConfigError(
                    f"model expects {model_config.num_classes} classes, dataset has {num_classes}")
            model = SegmentationModel(model_config, seed=int(resolved["seed"]))
            start_epoch = 0
            if resolved["resume"]:
                arrays = load_checkpoint(resolved["resume"])
                start_epoch = int(arrays.pop("_epochs_done")[0])
                model.load_state(arrays)
            train_model(model, data["train"], data.get("val", []),
                        int(resolved["epochs"]), optimizer, seed=int(resolved["seed"]),
                        batch_scenes=int(resolved["batch_scenes"]), log_fn=log_fn,
                        start_epoch=start_epoch)
            arrays = dict(model.state_arrays())
            arrays["_epochs_done"] = np.asarray([start_epoch + int(resolved["epochs"])],
                                                dtype=np.int64)
            save_checkpoint(out / "checkpoints" / "final.ckpt", arrays)
            with open(out / "model.json", "w") as fh:
                json.dump(model_config.to_dict(), fh, indent=2)
    _write_metrics(out, rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# search

SEARCH_DEFAULTS = {
    "data": None, "out": None, "supernet": None, "space": None,
    "macs": None, "latency": None, "predictor": None,
    "n_pop": 32, "top_k": 8, "generations": 20, "mutation_prob": 0.1,
    "seed": 0, "resample_budget": 1000, "macs_sample": 20, "calib_scenes": 16,
}


def cmd_search(args):
    resolved = _resolve(SEARCH_DEFAULTS, args.config, vars(args))
    for key in ("data", "out", "supernet", "space"):
        if not resolved[key]:
            raise ConfigError(f"search needs --{key.replace('_', '-')}")
    with open(resolved["space"]) as fh:
        space = nas.SearchSpace.from_dict(json.load(fh))
    data, _ = load_dataset(resolved["data"])
    out = Path(resolved["out"])
    _write_snapshot(out, resolved)

    supernet = nas.SuperNet(space)
    arrays = load_checkpoint(resolved["supernet"])
    arrays.pop("_epochs_done", None)
    for name, arr in arrays.items():
        if name in supernet.store:
            supernet.store[name][...] = arr

    constraint_fn = None
    estimator = None
    if resolved["macs"] is not None and resolved["latency"] is not None:
        raise ConfigError("choose one of --macs or --latency")
    if resolved["macs"] is not None:
        estimator = nas.MacsEstimator(space, data["train"][: int(resolved["macs_sample"])])
        constraint = nas.ResourceConstraint("macs", float(resolved["macs"]))
        constraint_fn = nas.make_constraint_fn(constraint, macs_estimator=estimator)
    elif resolved["latency"] is not None:
        if not resolved["predictor"]:
            raise ConfigError("a latency constraint needs --predictor")
        predictor = nas.LatencyPredictor.load(resolved["predictor"])
        constraint = nas.ResourceConstraint("latency", float(resolved["latency"]))
        constraint_fn = nas.make_constraint_fn(constraint, predictor=predictor,
                                               search_space=space)

    calib = data["train"][: int(resolved["calib_scenes"])]
    fitness_scenes = data.get("val") or data["train"]

    def fitness(arch):
        model = supernet.extract(arch)
        nas.recalibrate_bn(model, calib)
        return evaluate_model(model, fitness_scenes)["miou"]

    log_path = out / "search.log"
    with open(log_path, "w") as log_fh:
        def log_fn(entry):
            usage = None
            if estimator is not None:
                usage = estimator.estimate(nas.decode(space, np.asarray(entry["best_vector"])))
                usage = usage / float(resolved["macs"])
            entry = dict(entry, constraint_usage=usage)
            log_fh.write(json.dumps(entry) + "\n")
            print(f"generation {entry['generation']}: best fitness {entry['best_fitness']:.4f}")

        result = nas.evolutionary_search(
            space, fitness, n_pop=int(resolved["n_pop"]), top_k=int(resolved["top_k"]),
            generations=int(resolved["generations"]),
            mutation_prob=float(resolved["mutation_prob"]), seed=int(resolved["seed"]),
            constraint_fn=constraint_fn, resample_budget=int(resolved["resample_budget"]),
            log_fn=log_fn)

    best = {"arch": result.best_arch.to_dict(), "fitness": result.best_fitness,
            "vector": nas.encode(space, result.best_arch).tolist(),
            "model_config": nas.model_config_for(space, result.best_arch).to_dict()}
    with open(out / "best_arch.json", "w") as fh:
        json.dump(best, fh, indent=2)
    print(f"best fitness {result.best_fitness:.4f} after {result.evaluations} evaluations")
    return EXIT_OK


# ---------------------------------------------------------------------------
# latency campaign + predictor fitting

CAMPAIGN_DEFAULTS = {
    "space": None, "out": None, "samples": 500, "points": 512, "seed": 0,
    "repeats": 5,
}


def cmd_latency_campaign(args):
    resolved = _resolve(CAMPAIGN_DEFAULTS, args.config, vars(args))
    if not resolved["space"] or not resolved["out"]:
        raise ConfigError("latency-campaign needs --space and --out")
    with open(resolved["space"]) as fh:
        space = nas.SearchSpace.from_dict(json.load(fh))
    rng = np.random.default_rng(int(resolved["seed"]))
    scene = bench_mod.default_bench_scene(points=int(resolved["points"]),
                                          seed=int(resolved["seed"]))
    vectors, latencies = [], []
    samples = int(resolved["samples"])
    for i in range(samples):
        arch = nas.sample_uniform(space, 1, rng)
        model = SegmentationModel(nas.model_config_for(space, arch),
                                  seed=int(resolved["seed"]))
        median, _ = bench_mod.time_fn(lambda: model.predict(scene),
                                      repeats=int(resolved["repeats"]), warmup=1)
        vectors.append(nas.encode(space, arch))
        latencies.append(median / 1e6)
        if (i + 1) % 50 == 0:
            print(f"measured {i + 1}/{samples} candidates")
    out_path = Path(resolved["out"])
    out_path.parent.mkdir(parents=True, exist_ok=True)
    nas.save_pairs(out_path, np.asarray(vectors), latencies)
    _write_snapshot(out_path.parent, resolved)
    print(f"wrote {samples} (vector, ms) pairs to {out_path}")
    return EXIT_OK


FIT_DEFAULTS = {
    "pairs": None, "out": None, "hidden": "64,64", "epochs": 800, "lr": 0.01,
    "seed": 0, "val_fraction": 0.2,
}


def cmd_fit_predictor(args):
    resolved = _resolve(FIT_DEFAULTS, args.config, vars(args))
    if not resolved["pairs"] or not resolved["out"]:
        raise ConfigError("fit-predictor needs --pairs and --out")
    vectors, targets = nas.load_pairs(resolved["pairs"])
    hidden = tuple(int(x) for x in str(resolved["hidden"]).split(",") if x)
    predictor, report = nas.fit_latency_predictor(
        vectors, targets, hidden=hidden, epochs=int(resolved["epochs"]),
        lr=float(resolved["lr"]), seed=int(resolved["seed"]),
        val_fraction=float(resolved["val_fraction"]))
    predictor.save(resolved["out"])
    print(f"held-out mean relative error: {report['val_mre'] * 100:.2f}% "
          f"({report['val_pairs']} pairs); train: {report['train_mre'] * 100:.2f}%")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench

BENCH_DEFAULTS = {
    "out": None, "repeats": 5, "seed": 0, "points": 4096,
    "resolutions": None, "array_mb": 64, "indices": 2 ** 22,
    "point_counts": "1000,10000,100000", "hash_resolution": 64, "channels": 16,
}


def cmd_bench(args):
    resolved = _resolve(BENCH_DEFAULTS, args.config, vars(args))
    name = args.benchmark
    repeats = int(resolved["repeats"])
    seed = int(resolved["seed"])
    if name == "access":
        report = bench_mod.bench_access_pattern(
            array_bytes=int(resolved["array_mb"]) * 2 ** 20,
            index_count=int(resolved["indices"]), seed=seed, repeats=repeats)
    elif name == "memory":
        rs = resolved["resolutions"] or "2,4,8,16,32,64"
        report = bench_mod.bench_memory_model(
            resolutions=tuple(int(x) for x in str(rs).split(",")), seed=seed)
    elif name == "crossover":
        rs = resolved["resolutions"] or "4,6,8,12,16,24,32"
        report = bench_mod.bench_primitive_crossover(
            point_count=int(resolved["points"]),
            resolutions=tuple(int(x) for x in str(rs).split(",")),
            channels=int(resolved["channels"]), seed=seed, repeats=repeats)
    elif name == "hash":
        counts = tuple(int(x) for x in str(resolved["point_counts"]).split(","))
        report = bench_mod.bench_hash_vs_naive(
            point_counts=counts, resolution=int(resolved["hash_resolution"]),
            seed=seed, repeats=repeats)
    elif name == "backends":
        report = bench_mod.bench_backends(seed=seed, repeats=repeats)
    else:
        raise ConfigError(f"unknown benchmark {name!r}")
    print(report.to_text())
    if resolved["out"]:
        out = Path(resolved["out"])
        out.mkdir(parents=True, exist_ok=True)
        report.to_csv(out / f"{report.benchmark}.csv")
        _write_snapshot(out, dict(resolved, benchmark=name))
        print(f"csv written to {out / (report.benchmark + '.csv')}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

EVAL_DEFAULTS = {"data": None, "run": None, "checkpoint": None,
                 "model_config": None, "split": "test"}


def cmd_eval(args):
    resolved = _resolve(EVAL_DEFAULTS, args.config, vars(args))
    if not resolved["data"]:
        raise ConfigError("eval needs --data")
    if resolved["run"]:
        run = Path(resolved["run"])
        config_path = run / "model.json"
        ckpt_path = run / "checkpoints" / "final.ckpt"
    else:
        if not resolved["checkpoint"] or not resolved["model_config"]:
            raise ConfigError("eval needs --run, or --checkpoint with --model-config")
        config_path = Path(resolved["model_config"])
        ckpt_path = Path(resolved["checkpoint"])
    with open(config_path) as fh:
        model_config = ModelConfig.from_dict(json.load(fh))
    model = SegmentationModel(model_config)
    arrays = load_checkpoint(ckpt_path)
    arrays.pop("_epochs_done", None)
    model.load_state(arrays)
    data, meta = load_dataset(resolved["data"], splits=(resolved["split"],))
    scenes = data[resolved["split"]]
    if not scenes:
        raise ConfigError(f"no scenes in split {resolved['split']!r}")
    result = evaluate_model(model, scenes)
    for name, iou in zip(meta["classes"], result["per_class"]):
        print(f"iou[{name}] = {iou:.4f}")
    print(f"mIoU = {result['miou']:.4f}  accuracy = {result['accuracy']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="pointvoxel",
                                     description="point-voxel convolution toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, options):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON file of resolved options")
        for opt, kind in options:
            flag = "--" + opt.replace("_", "-")
            if kind is bool:
                p.add_argument(flag, dest=opt, action="store_true", default=None)
                p.add_argument("--no-" + opt.replace("_", "-"), dest=opt,
                               action="store_false", default=None)
            else:
                p.add_argument(flag, dest=opt, type=kind, default=None)
        p.set_defaults(fn=fn)
        return p

    add("gen-data", cmd_gen_data,
        [("out", str), ("scenes", int), ("seed", int), ("classes", str),
         ("extent", float), ("split", str), ("force", bool)])
    add("train", cmd_train,
        [("data", str), ("out", str), ("model", str), ("channels", str),
         ("resolution", int), ("voxel_size", float), ("classifier_hidden", str),
         ("epochs", int), ("lr", float), ("optimizer", str), ("momentum", float),
         ("batch_scenes", int), ("seed", int), ("resume", str), ("supernet", bool),
         ("space", str), ("candidates", int), ("shrink", bool), ("model_config", str)])
    add("search", cmd_search,
        [("data", str), ("out", str), ("supernet", str), ("space", str),
         ("macs", float), ("latency", float), ("predictor", str), ("n_pop", int),
         ("top_k", int), ("generations", int), ("mutation_prob", float),
         ("seed", int), ("resample_budget", int), ("macs_sample", int),
         ("calib_scenes", int)])
    add("latency-campaign", cmd_latency_campaign,
        [("space", str), ("out", str), ("samples", int), ("points", int),
         ("seed", int), ("repeats", int)])
    add("fit-predictor", cmd_fit_predictor,
        [("pairs", str), ("out", str), ("hidden", str), ("epochs", int),
         ("lr", float), ("seed", int), ("val_fraction", float)])
    bench_p = add("bench", cmd_bench,
                  [("out", str), ("repeats", int), ("seed", int), ("points", int),
                   ("resolutions", str), ("array_mb", int), ("indices", int),
                   ("point_counts", str), ("hash_resolution", int), ("channels", int)])
    bench_p.add_argument("benchmark",
                         choices=["access", "memory", "crossover", "hash", "backends"])
    add("eval", cmd_eval,
        [("data", str), ("run", str), ("checkpoint", str), ("model_config", str),
         ("split", str)])
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    start = time.time()
    try:
        code = args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleConstraintError as exc:
        print(f"infeasible constraint: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (FileFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except PointVoxelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.command not in ("eval", "bench"):
        print(f"done in {time.time() - start:.1f}s")
    return code


if __name__ == "__main__":
    sys.exit(main())
