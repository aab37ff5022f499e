"""Segmentation networks built from point-voxel blocks.

A model is a stack of blocks over a shared normalized cloud, a max-pooled
global feature fused back into every point, and a per-point classifier.
The classifier's first layer takes the per-point and global features
through separate weight matrices (mathematically identical to concatenating
them, but it keeps every weight prefix-sliceable for the weight-sharing
supernet).

The point-only baseline (kind "pointmlp") is the same network with the
voxel branches removed; `matched_pointmlp_config` widens it until its
parameter count reaches a reference model's.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .cloud import NORMALIZED
from .errors import ConfigError, ContractError
from .pvconv import PVConvBlock, _init_linear
from .sparse import SPVConvBlock

KINDS = ("pvcnn", "spvcnn", "pointmlp")


@dataclass
class BlockSpec:
    out_channels: int
    resolution: int | None = None
    voxel_size: float | None = None
    voxel_depth: int = 2
    mlp_hidden: tuple = ()

    def to_dict(self):
        d = {"out_channels": self.out_channels, "voxel_depth": self.voxel_depth}
        if self.resolution is not None:
            d["resolution"] = self.resolution
        if self.voxel_size is not None:
            d["voxel_size"] = self.voxel_size
        if self.mlp_hidden:
            d["mlp_hidden"] = list(self.mlp_hidden)
        return d


@dataclass
class ModelConfig:
    kind: str
    in_channels: int
    num_classes: int
    blocks: list
    classifier_hidden: tuple = (64,)
    use_bn: bool = True
    slope: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; choose from {KINDS}")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if not self.blocks:
            raise ConfigError("model needs at least one block")
        for i, spec in enumerate(self.blocks):
            if self.kind == "pvcnn" and spec.resolution is None:
                raise ConfigError(f"block {i}: pvcnn blocks need a resolution")
            if self.kind == "spvcnn" and spec.voxel_size is None:
                raise ConfigError(f"block {i}: spvcnn blocks need a voxel_size")

    def to_dict(self):
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "blocks": [b.to_dict() for b in self.blocks],
            "classifier_hidden": list(self.classifier_hidden),
            "use_bn": self.use_bn,
            "slope": self.slope,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            blocks = [
                BlockSpec(
                    out_channels=int(b["out_channels"]),
                    resolution=b.get("resolution"),
                    voxel_size=b.get("voxel_size"),
                    voxel_depth=int(b.get("voxel_depth", 2)),
                    mlp_hidden=tuple(b.get("mlp_hidden", ())),
                )
                for b in d["blocks"]
            ]
            return cls(
                kind=d["kind"],
                in_channels=int(d["in_channels"]),
                num_classes=int(d["num_classes"]),
                blocks=blocks,
                classifier_hidden=tuple(d.get("classifier_hidden", (64,))),
                use_bn=bool(d.get("use_bn", True)),
                slope=float(d.get("slope", 0.1)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed model config: {exc}") from exc


class _PointBlock:
    """Linear + optional batchnorm + leaky rectifier; the baseline's block."""

    def __init__(self, in_channels, out_channels, use_bn=True, slope=0.1,
                 dtype=np.float32, rng=None, weights=None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.use_bn = use_bn
        self.slope = slope
        self.dtype = np.dtype(dtype)
        rng = rng if rng is not None else np.random.default_rng(0)
        weights = weights or {}
        self.params = {}
        self.bn = {}

        def param(name, init):
            arr = weights.get(name)
            tensor = ad.Tensor(arr if arr is not None else init(), requires_grad=True, name=name)
            self.params[name] = tensor

        param("point.lin0.weight", lambda: _init_linear(rng, in_channels, out_channels, self.dtype))
        param("point.lin0.bias", lambda: np.zeros(out_channels, self.dtype))
        if use_bn:
            param("point.bn0.gamma", lambda: np.ones(out_channels, self.dtype))
            param("point.bn0.beta", lambda: np.zeros(out_channels, self.dtype))
            state = ad.BatchNormState(out_channels, dtype=self.dtype)
            if "point.bn0.running_mean" in weights:
                state.running_mean = weights["point.bn0.running_mean"]
                state.running_var = weights["point.bn0.running_var"]
            self.bn["point.bn0"] = state

    def forward(self, coords, feats, training=False):
        h = ad.matmul(feats, self.params["point.lin0.weight"])
        h = ad.add_bias(h, self.params["point.lin0.bias"])
        if self.use_bn:
            h = ad.batchnorm(h, self.params["point.bn0.gamma"], self.params["point.bn0.beta"],
                             self.bn["point.bn0"], training, channel_axis=1)
        return ad.leaky_relu(h, self.slope)


def _make_block(config, spec, in_channels, dtype, rng, weights):
    common = dict(use_bn=config.use_bn, slope=config.slope, dtype=dtype, rng=rng,
                  weights=weights)
    if config.kind == "pvcnn":
        return PVConvBlock(in_channels, spec.out_channels, spec.resolution,
                           voxel_depth=spec.voxel_depth, mlp_hidden=spec.mlp_hidden, **common)
    if config.kind == "spvcnn":
        return SPVConvBlock(in_channels, spec.out_channels, spec.voxel_size,
                            voxel_depth=spec.voxel_depth, mlp_hidden=spec.mlp_hidden, **common)
    return _PointBlock(in_channels, spec.out_channels, **common)


class SegmentationModel:
    """Block stack -> global max feature -> per-point classifier."""

    def __init__(self, config, dtype=np.float32, seed=0, weights=None):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        weights = weights or {}
        self.blocks = []
        self.params = {}
        self.bn = {}

        c_prev = config.in_channels
        for i, spec in enumerate(config.blocks):
            block_weights = {
                name[len(f"block{i}."):]: arr
                for name, arr in weights.items() if name.startswith(f"block{i}.")
            }
            block = _make_block(config, spec, c_prev, dtype, rng, block_weights)
            self.blocks.append(block)
            for local, tensor in block.params.items():
                self.params[f"block{i}.{local}"] = tensor
            for local, state in block.bn.items():
                self.bn[f"block{i}.{local}"] = state
            c_prev = spec.out_channels

        self._build_classifier(c_prev, rng, weights)

    def _param(self, name, init, weights):
        arr = weights.get(name)
        tensor = ad.Tensor(arr if arr is not None else init(), requires_grad=True, name=name)
        self.params[name] = tensor
        return tensor

    def _build_classifier(self, c_last, rng, weights):
        cfg = self.config
        widths = list(cfg.classifier_hidden) + [cfg.num_classes]
        w0 = widths[0]
        self._param("classifier.local.weight",
                    lambda: _init_linear(rng, c_last, w0, self.dtype), weights)
        self._param("classifier.global.weight",
                    lambda: _init_linear(rng, c_last, w0, self.dtype), weights)
        self._param("classifier.lin0.bias", lambda: np.zeros(w0, self.dtype), weights)
        if cfg.use_bn and len(widths) > 1:
            self._param("classifier.bn0.gamma", lambda: np.ones(w0, self.dtype), weights)
            self._param("classifier.bn0.beta", lambda: np.zeros(w0, self.dtype), weights)
            state = ad.BatchNormState(w0, dtype=self.dtype)
            if "classifier.bn0.running_mean" in weights:
                state.running_mean = weights["classifier.bn0.running_mean"]
                state.running_var = weights["classifier.bn0.running_var"]
            self.bn["classifier.bn0"] = state
        c = w0
        for j, width in enumerate(widths[1:], start=1):
            self._param(f"classifier.lin{j}.weight",
                        lambda ci=c, w=width: _init_linear(rng, ci, w, self.dtype), weights)
            self._param(f"classifier.lin{j}.bias", lambda w=width: np.zeros(w, self.dtype), weights)
            if cfg.use_bn and j < len(widths) - 1:
                self._param(f"classifier.bn{j}.gamma", lambda w=width: np.ones(w, self.dtype), weights)
                self._param(f"classifier.bn{j}.beta", lambda w=width: np.zeros(w, self.dtype), weights)
                state = ad.BatchNormState(width, dtype=self.dtype)
                if f"classifier.bn{j}.running_mean" in weights:
                    state.running_mean = weights[f"classifier.bn{j}.running_mean"]
                    state.running_var = weights[f"classifier.bn{j}.running_var"]
                self.bn[f"classifier.bn{j}"] = state
            c = width

    def forward(self, coords, feats, training=False):
        """coords: normalized N x 3 array; feats: N x C_in Tensor."""
        h = feats
        for block in self.blocks:
            h = block.forward(coords, h, training)
        pooled = ad.max_over_rows(h)
        tiled = ad.tile_rows(pooled, h.shape[0])
        z = ad.add(ad.matmul(h, self.params["classifier.local.weight"]),
                   ad.matmul(tiled, self.params["classifier.global.weight"]))
        z = ad.add_bias(z, self.params["classifier.lin0.bias"])
        widths = list(self.config.classifier_hidden) + [self.config.num_classes]
        for j in range(1, len(widths)):
            if self.config.use_bn:
                z = ad.batchnorm(z, self.params[f"classifier.bn{j - 1}.gamma"],
                                 self.params[f"classifier.bn{j - 1}.beta"],
                                 self.bn[f"classifier.bn{j - 1}"], training, channel_axis=1)
            z = ad.leaky_relu(z, self.config.slope)
            z = ad.matmul(z, self.params[f"classifier.lin{j}.weight"])
            z = ad.add_bias(z, self.params[f"classifier.lin{j}.bias"])
        return z

    def forward_cloud(self, pc, training=False):
        if pc.space != NORMALIZED:
            raise ContractError("model forward expects a normalized cloud")
        feats = ad.Tensor(np.ascontiguousarray(pc.features, dtype=self.dtype))
        return self.forward(pc.coords, feats, training)

    def predict(self, pc):
        return np.argmax(self.forward_cloud(pc, training=False).data, axis=1)

    def param_count(self):
        return int(sum(t.data.size for t in self.params.values()))

    def param_arrays(self):
        return {name: t.data for name, t in self.params.items()}

    def state_arrays(self):
        """All persistent arrays (weights plus batchnorm running stats)."""
        arrays = dict(self.param_arrays())
        for name, state in self.bn.items():
            arrays[f"{name}.running_mean"] = state.running_mean
            arrays[f"{name}.running_var"] = state.running_var
        return arrays

    def load_state(self, arrays):
        for name, tensor in self.params.items():
            if name not in arrays:
                raise ConfigError(f"checkpoint is missing parameter {name!r}")
            if arrays[name].shape != tensor.data.shape:
                raise ConfigError(
                    f"checkpoint shape {arrays[name].shape} != model shape "
                    f"{tensor.data.shape} for {name!r}"
                )
            tensor.data[...] = arrays[name]
        for name, state in self.bn.items():
            state.running_mean[...] = arrays[f"{name}.running_mean"]
            state.running_var[...] = arrays[f"{name}.running_var"]


def build_pvcnn(config, dtype=np.float32, seed=0):
    """Build a trainable segmentation model from a ModelConfig (or dict)."""
    if isinstance(config, dict):
        config = ModelConfig.from_dict(config)
    return SegmentationModel(config, dtype=dtype, seed=seed)


def matched_pointmlp_config(ref_config, ref_params, in_channels=None):
    """Point-only baseline config with at least ref_params parameters.

    Widens the per-block widths by a common factor until the parameter count
    matches or slightly exceeds the reference; returns (config, params).
    """
    in_channels = in_channels if in_channels is not None else ref_config.in_channels
    base = [spec.out_channels for spec in ref_config.blocks]

    def build(scale):
        widths = [max(4, int(round(scale * w))) for w in base]
        cfg = ModelConfig(
            kind="pointmlp",
            in_channels=in_channels,
            num_classes=ref_config.num_classes,
            blocks=[BlockSpec(out_channels=w) for w in widths],
            classifier_hidden=ref_config.classifier_hidden,
            use_bn=ref_config.use_bn,
            slope=ref_config.slope,
        )
        return cfg, SegmentationModel(cfg).param_count()

    lo, hi = 1.0, 1.0
    cfg, count = build(hi)
    while count < ref_params and hi < 64:
        hi *= 2
        cfg, count = build(hi)
    if count < ref_params:
        raise ConfigError("cannot match the reference parameter count")
    while hi - lo > 0.01:
        mid = (lo + hi) / 2
        cfg_mid, count_mid = build(mid)
        if count_mid >= ref_params:
            hi, cfg, count = mid, cfg_mid, count_mid
        else:
            lo = mid
    return cfg, count
