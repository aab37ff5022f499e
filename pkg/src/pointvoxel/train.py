"""Dataset plumbing and training loops.

Scenes are generated raw, stored as .pvpc files, and prepared for the
models by normalizing and using the normalized coordinates as the input
features. Training is plain per-batch gradient descent on the mean
per-point cross entropy; evaluation reports mean intersection-over-union
with one global confusion matrix per class.
"""

import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .cloud import (SceneConfig, generate_synthetic_scene, load_pvpc, normalize,
                    save_pvpc)
from .errors import ConfigError, ContractError, TrainingError
from .nas.space import depth_shrink_schedule

SPLITS = ("train", "val", "test")


def prepare_scene(pc):
    """Normalize a raw cloud and use its normalized coordinates as features."""
    pcn = normalize(pc) if pc.space == "raw" else pc
    return pcn.with_features(np.ascontiguousarray(pcn.coords, dtype=np.float32))


def scene_config_from_dict(d):
    return SceneConfig(
        primitives=dict(d["primitives"]),
        extent=float(d.get("extent", 10.0)),
        points_per_instance={k: int(v) for k, v in d.get("points_per_instance", {}).items()},
        jitter=float(d.get("jitter", 0.002)),
    )


def generate_dataset(out_dir, num_scenes, seed, config, split=(8, 1, 1), force=False):
    """Write train/val/test splits of synthetic scenes plus a meta file."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} exists; pass force to overwrite")
    if len(split) != 3 or sum(split) <= 0:
        raise ConfigError("split must be three nonnegative weights")
    counts = [int(num_scenes * w / sum(split)) for w in split]
    counts[0] = num_scenes - counts[1] - counts[2]
    meta = {
        "num_scenes": num_scenes,
        "seed": seed,
        "classes": list(config.class_names),
        "config": {
            "primitives": dict(config.primitives),
            "extent": config.extent,
            "points_per_instance": dict(config.points_per_instance),
            "jitter": config.jitter,
        },
        "split": {name: n for name, n in zip(SPLITS, counts)},
    }
    index = 0
    for name, n in zip(SPLITS, counts):
        split_dir = out / name
        split_dir.mkdir(parents=True, exist_ok=True)
        for _ in range(n):
            pc = generate_synthetic_scene(config, seed + index)
            save_pvpc(split_dir / f"scene_{index:05d}.pvpc", pc)
            index += 1
    with open(out / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2)
    return meta


def load_dataset(data_dir, splits=SPLITS, prepare=True):
    """Load a generated dataset; returns (dict split -> clouds, meta)."""
    data = {}
    root = Path(data_dir)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise ConfigError(f"{root} is not a dataset directory (no meta.json)")
    with open(meta_path) as fh:
        meta = json.load(fh)
    for name in splits:
        split_dir = root / name
        clouds = []
        if split_dir.exists():
            for path in sorted(split_dir.glob("*.pvpc")):
                pc = load_pvpc(path)
                clouds.append(prepare_scene(pc) if prepare else pc)
        data[name] = clouds
    return data, meta


def confusion_matrix(pred, labels, num_classes):
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (labels, pred), 1)
    return conf


def iou_per_class(conf):
    """TP / (TP + FP + FN) per class; classes absent everywhere give nan."""
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    union = tp + fp + fn
    with np.errstate(invalid="ignore"):
        return np.where(union > 0, tp / union, np.nan)


def mean_iou(conf):
    per_class = iou_per_class(conf)
    return float(np.nanmean(per_class))


def evaluate_model(model, scenes):
    """mIoU, per-class IoU, and point accuracy over a scene list."""
    num_classes = model.config.num_classes
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for pc in scenes:
        if pc.labels is None:
            raise ContractError("evaluation scenes need labels")
        conf += confusion_matrix(model.predict(pc), pc.labels, num_classes)
    per_class = iou_per_class(conf)
    acc = float(np.diag(conf).sum() / max(conf.sum(), 1))
    return {"miou": float(np.nanmean(per_class)), "per_class": per_class.tolist(),
            "accuracy": acc, "confusion": conf}


def batch_loss(model, scenes, training=True):
    total = None
    for pc in scenes:
        if pc.labels is None:
            raise TrainingError("training scenes need labels")
        logits = model.forward_cloud(pc, training=training)
        loss = ad.cross_entropy_per_point(logits, pc.labels)
        total = loss if total is None else ad.add(total, loss)
    return ad.scale(total, 1.0 / len(scenes))


def train_model(model, train_scenes, val_scenes, epochs, optimizer, seed=0,
                batch_scenes=1, log_fn=None, start_epoch=0):
    """Plain training loop; returns one metrics row per epoch."""
    rng = np.random.default_rng(seed)
    arrays = model.param_arrays()
    metrics = []
    for epoch in range(start_epoch, start_epoch + epochs):
        order = rng.permutation(len(train_scenes))
        losses = []
        for lo in range(0, len(order), batch_scenes):
            batch = [train_scenes[i] for i in order[lo:lo + batch_scenes]]
            with ad.Tape() as tape:
                loss = batch_loss(model, batch, training=True)
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            tape.backward(loss)
            grads = {name: t.grad for name, t in model.params.items() if t.grad is not None}
            optimizer.step(arrays, grads)
            losses.append(float(loss.data))
        row = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val_scenes:
            val = evaluate_model(model, val_scenes)
            row["val_miou"] = val["miou"]
            row["val_accuracy"] = val["accuracy"]
        metrics.append(row)
        if log_fn is not None:
            log_fn(row)
    return metrics


def train_supernet(supernet, train_scenes, epochs, optimizer, seed=0,
                   num_candidates=2, batch_scenes=1, shrink=True, log_fn=None):
    """Uniform-sampling supernet training with progressive depth shrinking."""
    rng = np.random.default_rng(seed)
    schedules = [
        depth_shrink_schedule(stage.max_depth, epochs) if shrink else [1] * epochs
        for stage in supernet.space.stages
    ]
    metrics = []
    for epoch in range(epochs):
        floors = [schedule[epoch] for schedule in schedules]
        order = rng.permutation(len(train_scenes))
        losses = []
        for lo in range(0, len(order), batch_scenes):
            batch = [train_scenes[i] for i in order[lo:lo + batch_scenes]]
            results = supernet.train_step(batch, num_candidates, floors, optimizer, rng)
            losses.extend(loss for _, loss in results)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)),
               "depth_floors": list(floors)}
        metrics.append(row)
        if log_fn is not None:
            log_fn(row)
    return metrics
