"""Dense point-voxel convolution.

The primitive has two branches over a shared normalized cloud: a coarse
voxel branch (scatter-average the point features onto an r^3 grid, run a
small stack of 3D convolutions, interpolate back to the points) and a
per-point MLP branch at full resolution; outputs fuse by addition.
Voxelization and devoxelization each touch every point exactly once.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .cloud import NORMALIZED, voxel_indices
from .errors import ConfigError, ContractError, ShapeError


@dataclass
class DenseVoxelGrid:
    resolution: int
    features: np.ndarray  # (C, r, r, r)
    counts: np.ndarray  # (r, r, r) ints


def flat_voxel_rows(coords, resolution):
    idx = voxel_indices(coords, resolution)
    return (idx[:, 0] * resolution + idx[:, 1]) * resolution + idx[:, 2]


def voxelize(pc, resolution):
    """Scatter-average point features into a dense grid (one pass).

    Empty voxels hold zeros; occupied voxels hold the mean of their points'
    features.
    """
    if pc.space != NORMALIZED:
        raise ContractError("voxelize expects a normalized cloud")
    if resolution < 1:
        raise ContractError(f"resolution must be >= 1, got {resolution}")
    r = int(resolution)
    rows = flat_voxel_rows(pc.coords, r)
    table, counts = kernels.scatter_mean(rows, np.ascontiguousarray(pc.features), r ** 3)
    features = np.ascontiguousarray(table.T.reshape(pc.num_features, r, r, r))
    return DenseVoxelGrid(r, features, counts.reshape(r, r, r))


def trilinear_corners(coords, resolution):
    """Corner cells and weights for interpolation against voxel centers.

    Centers sit at ((u + 0.5) / r); returns integer corner cells (N, 8, 3),
    which may fall outside the grid, and weights (N, 8) summing to one.
    """
    g = coords.astype(np.float64) * resolution - 0.5
    base = np.floor(g).astype(np.int64)
    frac = g - base
    corners = np.empty((coords.shape[0], 8, 3), dtype=np.int64)
    weights = np.empty((coords.shape[0], 8), dtype=np.float64)
    j = 0
    for bx in (0, 1):
        wx = frac[:, 0] if bx else 1.0 - frac[:, 0]
        for by in (0, 1):
            wy = frac[:, 1] if by else 1.0 - frac[:, 1]
            for bz in (0, 1):
                wz = frac[:, 2] if bz else 1.0 - frac[:, 2]
                corners[:, j, 0] = base[:, 0] + bx
                corners[:, j, 1] = base[:, 1] + by
                corners[:, j, 2] = base[:, 2] + bz
                weights[:, j] = wx * wy * wz
                j += 1
    return corners, weights


def _corner_flat_rows(corners, resolution):
    """Flatten corner cells to grid rows; out-of-range corners become -1."""
    inside = ((corners >= 0) & (corners < resolution)).all(axis=2)
    flat = (corners[:, :, 0] * resolution + corners[:, :, 1]) * resolution + corners[:, :, 2]
    flat[~inside] = -1
    return flat


def devoxelize_trilinear(grid, coords):
    """Interpolate grid features at the given normalized coordinates.

    Each point reads its 8 surrounding voxel centers with trilinear weights;
    corners outside the grid contribute zero (no weight renormalization).
    """
    corners, weights = trilinear_corners(coords, grid.resolution)
    rows = _corner_flat_rows(corners, grid.resolution)
    table = np.ascontiguousarray(grid.features.reshape(grid.features.shape[0], -1).T)
    return kernels.weighted_gather(table, rows, weights.astype(table.dtype))


def devoxelize_nearest(grid, coords):
    """Read each point's containing voxel; same-voxel points share features."""
    rows = flat_voxel_rows(coords, grid.resolution)
    table = np.ascontiguousarray(grid.features.reshape(grid.features.shape[0], -1).T)
    return kernels.gather_rows(table, rows)


def _init_linear(rng, fan_in, fan_out, dtype):
    std = np.sqrt(2.0 / fan_in)
    return (rng.normal(0.0, std, size=(fan_in, fan_out))).astype(dtype)


def _init_conv(rng, c_out, c_in, k, dtype):
    std = np.sqrt(2.0 / (c_in * k ** 3))
    return (rng.normal(0.0, std, size=(c_out, c_in, k, k, k))).astype(dtype)


class _TwoBranchBlock:
    """Shared wiring for the dense and sparse point-voxel blocks.

    Subclasses provide the voxel-branch weights and forward; the point
    branch (linear + optional batchnorm + leaky rectifier per layer) and the
    additive fusion live here. Weights may be supplied externally (shared
    storage for the search supernet) or initialized fresh.
    """

    KERNEL = 3

    def __init__(self, in_channels, out_channels, voxel_depth=2, mlp_hidden=(),
                 use_bn=True, slope=0.1, dtype=np.float32, rng=None, weights=None):
        if out_channels < 1 or in_channels < 1:
            raise ConfigError("channel counts must be positive")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.voxel_depth = voxel_depth
        self.mlp_widths = tuple(mlp_hidden) + (out_channels,)
        self.use_bn = use_bn
        self.slope = slope
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.bn = {}
        self._build(rng if rng is not None else np.random.default_rng(0), weights or {})

    def _param(self, name, rng_init, weights):
        arr = weights.get(name)
        if arr is None:
            arr = rng_init()
        tensor = ad.Tensor(arr, requires_grad=True, name=name)
        self.params[name] = tensor
        return tensor

    def _bn_state(self, name, channels, weights):
        state = ad.BatchNormState(channels, dtype=self.dtype)
        if f"{name}.running_mean" in weights:
            state.running_mean = weights[f"{name}.running_mean"]
            state.running_var = weights[f"{name}.running_var"]
        self.bn[name] = state
        return state

    def _build(self, rng, weights):
        k = self.KERNEL
        c_prev = self.in_channels
        for i in range(self.voxel_depth):
            self._build_voxel_conv(i, c_prev, self.out_channels, k, rng, weights)
            if self.use_bn:
                self._param(f"voxel.bn{i}.gamma", lambda: np.ones(self.out_channels, self.dtype), weights)
                self._param(f"voxel.bn{i}.beta", lambda: np.zeros(self.out_channels, self.dtype), weights)
                self._bn_state(f"voxel.bn{i}", self.out_channels, weights)
            c_prev = self.out_channels
        c_prev = self.in_channels
        for i, width in enumerate(self.mlp_widths):
            fan_in = c_prev
            self._param(f"point.lin{i}.weight",
                        lambda fi=fan_in, w=width: _init_linear(rng, fi, w, self.dtype), weights)
            self._param(f"point.lin{i}.bias", lambda w=width: np.zeros(w, self.dtype), weights)
            if self.use_bn:
                self._param(f"point.bn{i}.gamma", lambda w=width: np.ones(w, self.dtype), weights)
                self._param(f"point.bn{i}.beta", lambda w=width: np.zeros(w, self.dtype), weights)
                self._bn_state(f"point.bn{i}", width, weights)
            c_prev = width

    def _build_voxel_conv(self, i, c_in, c_out, k, rng, weights):
        raise NotImplementedError

    def _point_branch(self, feats, training):
        h = feats
        for i in range(len(self.mlp_widths)):
            h = ad.matmul(h, self.params[f"point.lin{i}.weight"])
            h = ad.add_bias(h, self.params[f"point.lin{i}.bias"])
            if self.use_bn:
                h = ad.batchnorm(h, self.params[f"point.bn{i}.gamma"],
                                 self.params[f"point.bn{i}.beta"],
                                 self.bn[f"point.bn{i}"], training, channel_axis=1)
            h = ad.leaky_relu(h, self.slope)
        return h

    def forward(self, coords, feats, training=False):
        if feats.shape[1] != self.in_channels:
            raise ShapeError(
                f"block expects {self.in_channels} input channels, got {feats.shape[1]}"
            )
        voxel_out = self._voxel_branch(coords, feats, training)
        point_out = self._point_branch(feats, training)
        return ad.add(voxel_out, point_out)

    def _voxel_branch(self, coords, feats, training):
        raise NotImplementedError


class PVConvBlock(_TwoBranchBlock):
    """Dense voxel branch at a fixed grid resolution plus a point MLP."""

    def __init__(self, in_channels, out_channels, resolution, **kwargs):
        if resolution < 1:
            raise ConfigError(f"resolution must be >= 1, got {resolution}")
        self.resolution = int(resolution)
        super().__init__(in_channels, out_channels, **kwargs)

    def _build_voxel_conv(self, i, c_in, c_out, k, rng, weights):
        self._param(f"voxel.conv{i}.weight",
                    lambda ci=c_in: _init_conv(rng, c_out, ci, k, self.dtype), weights)

    def _voxel_branch(self, coords, feats, training):
        r = self.resolution
        rows = flat_voxel_rows(coords, r)
        table, _ = ad.scatter_mean_op(feats, rows, r ** 3)
        grid = ad.to_grid(table, r)
        for i in range(self.voxel_depth):
            grid = ad.conv3d(grid, self.params[f"voxel.conv{i}.weight"], stride=1)
            if self.use_bn:
                grid = ad.batchnorm(grid, self.params[f"voxel.bn{i}.gamma"],
                                    self.params[f"voxel.bn{i}.beta"],
                                    self.bn[f"voxel.bn{i}"], training, channel_axis=0)
            grid = ad.leaky_relu(grid, self.slope)
        corners, weights_ = trilinear_corners(coords, r)
        corner_rows = _corner_flat_rows(corners, r)
        return ad.weighted_gather_op(ad.from_grid(grid), corner_rows, weights_)


def pvconv_forward(block, pc):
    """Run one PVConv block over a normalized cloud, keeping its coordinates."""
    if pc.space != NORMALIZED:
        raise ContractError("pvconv_forward expects a normalized cloud")
    if pc.num_features != block.in_channels:
        raise ShapeError(
            f"cloud has {pc.num_features} feature channels, block expects {block.in_channels}"
        )
    feats = ad.Tensor(np.ascontiguousarray(pc.features, dtype=block.dtype))
    out = block.forward(pc.coords, feats, training=False)
    return pc.with_features(out.data)
