"""Resource models for candidate networks: exact MAC accounting and a
learned latency regressor.

Sparse convolution work depends on the input sparsity pattern, so its MACs
are sum_d |map(d)| * C_in * C_out with kernel-map sizes averaged over a
dataset sample; dense convolutions and linear layers have closed forms.
The estimator reproduces the instrumented multiply counters of actual
execution exactly (up to float rounding of the averaging).

The latency path encodes candidates as fixed-length vectors, measures wall
time on the target machine, and fits a small MLP (trained with a mean
relative error objective on its positive predictions).
"""

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..checkpoint import load_checkpoint, save_checkpoint
from ..errors import ConfigError, ContractError, FileFormatError
from ..optim import Adam
from ..pvconv import _init_linear
from ..sparse import build_kernel_map, sparse_voxelize
from . import space as sp


@dataclass(frozen=True)
class ResourceConstraint:
    kind: str  # "macs" | "latency"
    budget: float

    def __post_init__(self):
        if self.kind not in ("macs", "latency"):
            raise ConfigError(f"unknown constraint kind {self.kind!r}")
        if self.budget <= 0:
            raise ConfigError("constraint budget must be positive")


class MacsEstimator:
    """Average MACs of a candidate over a dataset sample, as a pure function.

    Kernel-map sizes are cached per distinct voxel size (stride-1 stacks
    revoxelize the same coordinates, so all layers of a stage share maps).
    """

    def __init__(self, search_space, scenes):
        if not scenes:
            raise ContractError("MACs estimation needs a nonempty dataset sample")
        self.space = search_space
        self.avg_points = float(np.mean([pc.num_points for pc in scenes]))
        self.avg_pairs = {}
        self.dense_taps = {}
        if search_space.kind == "spvcnn":
            for vs in sorted({s.voxel_size for s in search_space.stages}):
                totals = []
                for pc in scenes:
                    st, _ = sparse_voxelize(pc, vs)
                    totals.append(build_kernel_map(st, stride=1).total_pairs)
                self.avg_pairs[vs] = float(np.mean(totals))
        else:
            for r in sorted({s.resolution for s in search_space.stages}):
                self.dense_taps[r] = float(ad.conv3d_valid_taps((r, r, r), 3, 1))

    def _aggregation_cost(self, stage):
        if self.space.kind == "spvcnn":
            return self.avg_pairs[stage.voxel_size]
        return self.dense_taps[stage.resolution]

    def estimate(self, arch):
        sp.validate_arch(self.space, arch)
        space = self.space
        total = 0.0
        c_prev = space.in_channels
        for s, stage in enumerate(space.stages):
            agg = self._aggregation_cost(stage)
            for c in arch.active_channels(s):
                cc = c_prev
                for _ in range(space.voxel_depth):
                    total += agg * cc * c
                    cc = c
                total += self.avg_points * c_prev * c  # point-branch linear
                c_prev = c
        widths = list(space.classifier_hidden) + [space.num_classes]
        total += 2.0 * self.avg_points * c_prev * widths[0]  # local + global heads
        for j in range(1, len(widths)):
            total += self.avg_points * widths[j - 1] * widths[j]
        return total


def estimate_macs(arch, scenes, search_space):
    """Average MACs of `arch` over `scenes` (convenience wrapper)."""
    return MacsEstimator(search_space, scenes).estimate(arch)


class LatencyPredictor:
    """MLP regressor from architecture vectors to milliseconds.

    Inputs are standardized by the training-set statistics; the network
    predicts log-latency, so predictions are finite and positive for every
    valid vector.
    """

    def __init__(self, weights, input_mean, input_std):
        self.weights = {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}
        self.input_mean = np.asarray(input_mean, dtype=np.float64)
        self.input_std = np.asarray(input_std, dtype=np.float64)
        self.num_layers = 1 + max(int(k.split(".")[0][3:]) for k in self.weights
                                  if k.startswith("lin"))

    def _forward(self, x):
        h = (x - self.input_mean) / self.input_std
        for i in range(self.num_layers):
            h = h @ self.weights[f"lin{i}.weight"] + self.weights[f"lin{i}.bias"]
            if i < self.num_layers - 1:
                h = np.where(h >= 0, h, 0.1 * h)
        return np.exp(h[:, 0])

    def predict(self, vector):
        return float(self._forward(np.asarray(vector, dtype=np.float64)[None, :])[0])

    def predict_many(self, vectors):
        return self._forward(np.asarray(vectors, dtype=np.float64))

    def predict_arch(self, search_space, arch):
        return self.predict(sp.encode(search_space, arch))

    def save(self, path):
        arrays = dict(self.weights)
        arrays["norm.mean"] = self.input_mean
        arrays["norm.std"] = self.input_std
        save_checkpoint(path, arrays)

    @classmethod
    def load(cls, path):
        arrays = load_checkpoint(path)
        mean = arrays.pop("norm.mean")
        std = arrays.pop("norm.std")
        return cls(arrays, mean, std)


def fit_latency_predictor(vectors, targets_ms, hidden=(64, 64), epochs=800,
                          lr=0.01, seed=0, val_fraction=0.2):
    """Fit the latency regressor on measured (vector, ms) pairs.

    Needs at least 200 pairs. Returns (predictor, report) where the report
    carries the held-out mean relative error and split sizes.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    targets = np.asarray(targets_ms, dtype=np.float64)
    if vectors.ndim != 2 or targets.shape != (vectors.shape[0],):
        raise ContractError("vectors must be S x L with S matching targets")
    if vectors.shape[0] < 200:
        raise ContractError(f"need at least 200 measured pairs, got {vectors.shape[0]}")
    if (targets <= 0).any():
        raise ContractError("latencies must be positive")
    if np.ptp(targets) == 0:
        warnings.warn("latency targets are all identical; fitting a constant")

    rng = np.random.default_rng(seed)
    order = rng.permutation(vectors.shape[0])
    n_val = max(1, int(round(val_fraction * vectors.shape[0])))
    val_idx, train_idx = order[:n_val], order[n_val:]

    mean = vectors[train_idx].mean(axis=0)
    std = vectors[train_idx].std(axis=0)
    std[std < 1e-8] = 1.0
    xs = (vectors - mean) / std

    widths = list(hidden) + [1]
    params = {}
    c = vectors.shape[1]
    for i, w in enumerate(widths):
        params[f"lin{i}.weight"] = ad.Tensor(_init_linear(rng, c, w, np.float64),
                                             requires_grad=True, name=f"lin{i}.weight")
        bias = np.zeros(w)
        if i == len(widths) - 1:
            bias[:] = np.log(targets[train_idx].mean())
        params[f"lin{i}.bias"] = ad.Tensor(bias, requires_grad=True, name=f"lin{i}.bias")
        c = w

    x_train = ad.Tensor(xs[train_idx], dtype=np.float64)
    t_train = ad.Tensor(targets[train_idx, None], dtype=np.float64)
    inv_t = ad.Tensor(1.0 / targets[train_idx, None], dtype=np.float64)

    def forward(x):
        h = x
        for i in range(len(widths)):
            h = ad.add_bias(ad.matmul(h, params[f"lin{i}.weight"]), params[f"lin{i}.bias"])
            if i < len(widths) - 1:
                h = ad.leaky_relu(h, 0.1)
        return ad.exp_(h)

    opt = Adam(lr=lr)
    arrays = {name: t.data for name, t in params.items()}
    for epoch in range(epochs):
        # cosine decay; the mean-relative-error objective needs a shrinking
        # step to settle near its kinked minimum
        opt.lr = lr * 0.5 * (1 + np.cos(np.pi * epoch / max(epochs - 1, 1)))
        with ad.Tape() as tape:
            pred = forward(x_train)
            loss = ad.mean_all(ad.mul(ad.abs_(ad.sub(pred, t_train)), inv_t))
        tape.backward(loss)
        opt.step(arrays, {name: t.grad for name, t in params.items()})

    predictor = LatencyPredictor({name: t.data.copy() for name, t in params.items()},
                                 mean, std)
    val_pred = predictor.predict_many(vectors[val_idx])
    val_mre = float(np.mean(np.abs(val_pred - targets[val_idx]) / targets[val_idx]))
    train_pred = predictor.predict_many(vectors[train_idx])
    train_mre = float(np.mean(np.abs(train_pred - targets[train_idx]) / targets[train_idx]))
    report = {"train_pairs": int(train_idx.size), "val_pairs": int(val_idx.size),
              "train_mre": train_mre, "val_mre": val_mre}
    return predictor, report


def save_pairs(path, vectors, targets_ms):
    """Write measured (vector, ms) pairs as CSV with a header row."""
    vectors = np.asarray(vectors, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"v{i}" for i in range(vectors.shape[1])] + ["ms"])
        for vec, ms in zip(vectors, targets_ms):
            writer.writerow([f"{x:.10g}" for x in vec] + [f"{ms:.6f}"])


def load_pairs(path):
    """Read a pair file; malformed rows raise with their line number."""
    vectors, targets = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FileFormatError(f"{path}: empty pair file") from None
        if not header or header[-1] != "ms":
            raise FileFormatError(f"{path}: line 1: expected header ending in 'ms'")
        width = len(header) - 1
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width + 1:
                raise FileFormatError(f"{path}: line {lineno}: expected {width + 1} fields, got {len(row)}")
            try:
                vectors.append([float(x) for x in row[:-1]])
                targets.append(float(row[-1]))
            except ValueError as exc:
                raise FileFormatError(f"{path}: line {lineno}: {exc}") from None
    return np.asarray(vectors, dtype=np.float64), np.asarray(targets, dtype=np.float64)


def make_constraint_fn(constraint, macs_estimator=None, predictor=None, search_space=None):
    """Bind a ResourceConstraint to its evaluator, returning arch -> bool."""
    if constraint is None:
        return None
    if constraint.kind == "macs":
        if macs_estimator is None:
            raise ConfigError("a MACs constraint needs a MacsEstimator")
        return lambda arch: macs_estimator.estimate(arch) <= constraint.budget
    if predictor is None or search_space is None:
        raise ConfigError("a latency constraint needs a predictor and the space")
    return lambda arch: predictor.predict_arch(search_space, arch) <= constraint.budget
