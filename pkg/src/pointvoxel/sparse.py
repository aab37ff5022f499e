"""Sparse point-voxel convolution.

Only occupied voxels are stored: a SparseTensor pairs integer (batch, u, v,
w) coordinates with feature rows. Coordinate indexing goes through an
open-addressed hash table, so voxelizing n points onto m active voxels
costs O(m + n) hash work instead of the O(mn) of per-point linear search;
the naive implementations kept here are the oracles and baselines the hash
path is checked and benchmarked against.

Convolution enumerates the k^3 = 27 kernel offsets; a kernel map lists, per
offset d, the active (input row, output row) pairs with in_coords[i] +
d * stride == out_coords[o]. Execution is gather-GEMM-scatter per offset,
so its multiply count is exactly sum_d |map(d)| * C_in * C_out.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .cloud import NORMALIZED
from .errors import ContractError, ShapeError
from .pvconv import _TwoBranchBlock

KERNEL_SIZE = 3
NUM_OFFSETS = KERNEL_SIZE ** 3

# lexicographic offsets over (-1, 0, 1)^3; index 13 is the center
OFFSETS = np.array(
    [(du, dv, dw) for du in (-1, 0, 1) for dv in (-1, 0, 1) for dw in (-1, 0, 1)],
    dtype=np.int64,
)
CENTER_OFFSET = 13


class CoordHashTable:
    """Open-addressed map from a 4-int coordinate to its row index.

    FNV-1a over the packed 16-bit components, linear probing, load factor
    kept at or below one half (the builder grows the table on probe
    overflow). Build-once, then read-only; probe counters feed the
    complexity instrumentation.
    """

    def __init__(self, coords, slot_key, slot_row, build_probes):
        self.coords = coords
        self._slot_key = slot_key
        self._slot_row = slot_row
        self.capacity = slot_key.shape[0]
        self.build_probes = build_probes
        self.query_probes = 0

    @classmethod
    def build(cls, coords):
        """Index unique coordinates; a duplicate row is a construction error."""
        coords = np.ascontiguousarray(coords, dtype=np.int64)
        keys = kernels.pack_coords(coords)
        slot_key, slot_row, _, is_new, n_unique, probes = kernels.hash_insert_unique(keys)
        if n_unique != coords.shape[0]:
            dup = int(np.flatnonzero(~is_new)[0])
            where = tuple(int(c) for c in coords[dup])
            raise ContractError(f"duplicate coordinate {where} at row {dup}")
        return cls(coords, slot_key, slot_row, probes)

    def __len__(self):
        return self.coords.shape[0]

    def query(self, coords):
        """Row index per query coordinate; -1 for absent coordinates."""
        coords = np.ascontiguousarray(coords, dtype=np.int64)
        rows, probes = kernels.hash_query(self._slot_key, self._slot_row,
                                          kernels.pack_coords(coords))
        self.query_probes += probes
        return rows


@dataclass
class SparseTensor:
    """Active voxel coordinates (M x 4: batch, u, v, w) with feature rows.

    stride is the voxel-size multiplier of the coordinate lattice;
    voxel_size is the edge length of a stride-1 cell in normalized units.
    """

    coords: np.ndarray
    features: np.ndarray
    stride: int = 1
    voxel_size: float = 1.0
    hash_table: CoordHashTable | None = field(default=None, repr=False, compare=False)
    build_probes: int = field(default=0, compare=False)

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.int64)
        if coords.ndim != 2 or coords.shape[1] != 4:
            raise ShapeError(f"sparse coords must be M x 4, got {coords.shape}")
        if coords.shape[0] < 1:
            raise ContractError("a sparse tensor needs at least one active voxel")
        if self.features.shape[0] != coords.shape[0]:
            raise ShapeError(
                f"features rows {self.features.shape[0]} != coords rows {coords.shape[0]}"
            )
        if self.stride < 1:
            raise ContractError(f"stride must be positive, got {self.stride}")
        if (coords[:, 1:] % self.stride).any():
            raise ContractError("spatial coordinates must be divisible by the stride")
        object.__setattr__(self, "coords", coords)

    @property
    def num_voxels(self):
        return self.coords.shape[0]

    def table(self):
        if self.hash_table is None:
            self.hash_table = CoordHashTable.build(self.coords)
        return self.hash_table


def build_hash(coords):
    """Construct a CoordHashTable over unique coordinates."""
    return CoordHashTable.build(coords)


def _voxel_index(coords, voxel_size, num_points):
    """Hash-index normalized coordinates into active cells.

    Returns (unique 4-int coords, point_to_voxel, CoordHashTable, probes).
    """
    resolution = int(np.ceil(1.0 / voxel_size))
    cells = np.floor(coords.astype(np.float64) / voxel_size).astype(np.int64)
    np.clip(cells, 0, resolution - 1, out=cells)
    coords4 = np.concatenate([np.zeros((num_points, 1), dtype=np.int64), cells], axis=1)
    keys = kernels.pack_coords(coords4)
    slot_key, slot_row, point_to_voxel, is_new, n_unique, probes = kernels.hash_insert_unique(keys)
    unique_coords = np.ascontiguousarray(coords4[is_new])
    table = CoordHashTable(unique_coords, slot_key, slot_row, probes)
    return unique_coords, point_to_voxel, table, probes


def sparse_voxelize(pc, voxel_size):
    """Bucket a normalized cloud into active voxels via hash indexing.

    Returns (SparseTensor, point_to_voxel). Features are averaged per cell;
    voxel rows appear in first-occurrence order of the points. The tensor
    keeps its hash table (reused for devoxelization and kernel maps) and the
    probe count spent building it, so total indexing stays O(m + n).
    """
    if pc.space != NORMALIZED:
        raise ContractError("sparse_voxelize expects a normalized cloud")
    if not 0 < voxel_size <= 1:
        raise ContractError(f"voxel_size must be in (0, 1], got {voxel_size}")
    unique_coords, point_to_voxel, table, probes = _voxel_index(
        pc.coords, voxel_size, pc.num_points)
    feats, _ = kernels.scatter_mean(point_to_voxel, np.ascontiguousarray(pc.features),
                                    unique_coords.shape[0])
    st = SparseTensor(unique_coords, feats, stride=1, voxel_size=voxel_size,
                      hash_table=table, build_probes=probes)
    return st, point_to_voxel


def naive_sparse_voxelize(pc, voxel_size, chunk=512):
    """O(mn) reference: each point linearly searches the known-voxel list.

    Matches sparse_voxelize exactly (row order, indices, features); kept as
    the correctness oracle and the complexity baseline for the benchmarks.
    """
    if pc.space != NORMALIZED:
        raise ContractError("naive_sparse_voxelize expects a normalized cloud")
    resolution = int(np.ceil(1.0 / voxel_size))
    cells = np.floor(pc.coords.astype(np.float64) / voxel_size).astype(np.int64)
    np.clip(cells, 0, resolution - 1, out=cells)
    coords4 = np.concatenate([np.zeros((pc.num_points, 1), dtype=np.int64), cells], axis=1)
    keys = kernels.pack_coords(coords4)
    known = np.empty(0, dtype=np.uint64)
    point_to_voxel = np.empty(pc.num_points, dtype=np.int64)
    first_rows = []
    for lo in range(0, keys.shape[0], chunk):
        batch = keys[lo:lo + chunk]
        if known.size:
            hits = batch[:, None] == known[None, :]  # the O(mn) comparison
            found = hits.any(axis=1)
            rows = hits.argmax(axis=1)
        else:
            found = np.zeros(batch.shape[0], dtype=bool)
            rows = np.zeros(batch.shape[0], dtype=np.int64)
        point_to_voxel[lo:lo + chunk][found] = rows[found]
        missing = np.flatnonzero(~found)
        if missing.size:
            new_keys, first_idx, inv = np.unique(batch[missing], return_index=True,
                                                 return_inverse=True)
            order = np.argsort(first_idx, kind="stable")
            rank = np.empty_like(order)
            rank[order] = np.arange(order.size)
            point_to_voxel[lo:lo + chunk][missing] = known.size + rank[inv]
            known = np.concatenate([known, new_keys[order]])
            first_rows.extend(lo + missing[first_idx[order]])
    unique_coords = np.ascontiguousarray(coords4[np.asarray(first_rows, dtype=np.int64)])
    feats, _ = kernels.scatter_mean(point_to_voxel, np.ascontiguousarray(pc.features),
                                    known.size)
    st = SparseTensor(unique_coords, feats, stride=1, voxel_size=voxel_size)
    return st, point_to_voxel


def naive_query(coords, queries):
    """Linear-scan membership oracle mirroring CoordHashTable.query."""
    coords = np.ascontiguousarray(coords, dtype=np.int64)
    keys = kernels.pack_coords(coords)
    qkeys = kernels.pack_coords(np.ascontiguousarray(queries, dtype=np.int64))
    hits = qkeys[:, None] == keys[None, :]
    rows = np.where(hits.any(axis=1), hits.argmax(axis=1), -1)
    return rows.astype(np.int64)


@dataclass
class KernelMap:
    """Per-offset (input row, output row) pairs in CSR layout.

    pairs_in/pairs_out are concatenated per offset; offset_ptr[j] ..
    offset_ptr[j + 1] delimits offset j. Within one offset an output row
    appears at most once (the matching input cell is unique), which the
    gather-GEMM-scatter execution relies on.
    """

    pairs_in: np.ndarray
    pairs_out: np.ndarray
    offset_ptr: np.ndarray
    out_coords: np.ndarray
    in_stride: int
    out_stride: int
    num_in: int
    in_coords: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_out(self):
        return self.out_coords.shape[0]

    @property
    def total_pairs(self):
        return int(self.pairs_in.shape[0])

    def pairs_at(self, offset_index):
        lo, hi = self.offset_ptr[offset_index], self.offset_ptr[offset_index + 1]
        return self.pairs_in[lo:hi], self.pairs_out[lo:hi]

    def per_offset_counts(self):
        return np.diff(self.offset_ptr)

    def invert(self):
        """Kernel map of the transposed (upsampling) convolution.

        A pair (i, o) under offset d becomes (o, i) under -d; with the
        lexicographic enumeration -d sits at index 26 - j.
        """
        if self.in_coords is None:
            raise ContractError("inverting a map requires its cached input coordinates")
        new_in, new_out, ptr = [], [], [0]
        for j in range(NUM_OFFSETS - 1, -1, -1):
            pi, po = self.pairs_at(j)
            order = np.argsort(po, kind="stable")  # ascending new-input rows
            new_in.append(po[order])
            new_out.append(pi[order])
            ptr.append(ptr[-1] + pi.shape[0])
        return KernelMap(
            pairs_in=np.concatenate(new_in),
            pairs_out=np.concatenate(new_out),
            offset_ptr=np.asarray(ptr, dtype=np.int64),
            out_coords=self.in_coords,
            in_stride=self.out_stride,
            out_stride=self.in_stride,
            num_in=self.num_out,
            in_coords=self.out_coords,
        )


def build_kernel_map(st, kernel_size=KERNEL_SIZE, stride=1):
    """Enumerate active (input, output) pairs per kernel offset via hashing.

    stride 1 keeps the input sites as outputs; stride 2 downsamples output
    coordinates to unique floor-divided cells. Costs O(k^3 m) hash queries.
    """
    if kernel_size != KERNEL_SIZE:
        raise ContractError("kernel size is fixed to 3 across the library")
    if stride not in (1, 2):
        raise ContractError(f"stride must be 1 or 2, got {stride}")
    table = st.table()
    if stride == 1:
        out_coords = st.coords
        out_stride = st.stride
    else:
        out_stride = st.stride * 2
        down = st.coords.copy()
        down[:, 1:] = (down[:, 1:] // out_stride) * out_stride
        keys = kernels.pack_coords(down)
        _, _, _, is_new, _, _ = kernels.hash_insert_unique(keys)
        out_coords = np.ascontiguousarray(down[is_new])
    pairs_in, pairs_out, ptr = [], [], [0]
    out_rows = np.arange(out_coords.shape[0], dtype=np.int64)
    for j in range(NUM_OFFSETS):
        delta = OFFSETS[j] * st.stride
        probe = out_coords.copy()
        probe[:, 1:] -= delta  # in = out - d * stride
        rows = table.query(probe)
        hit = rows >= 0
        pairs_in.append(rows[hit])
        pairs_out.append(out_rows[hit])
        ptr.append(ptr[-1] + int(hit.sum()))
    return KernelMap(
        pairs_in=np.concatenate(pairs_in),
        pairs_out=np.concatenate(pairs_out),
        offset_ptr=np.asarray(ptr, dtype=np.int64),
        out_coords=out_coords,
        in_stride=st.stride,
        out_stride=out_stride,
        num_in=st.num_voxels,
        in_coords=st.coords,
    )


def naive_kernel_map(st, stride=1):
    """Brute-force double loop over (input, output, offset); test oracle."""
    if stride == 1:
        out_coords = st.coords
        out_stride = st.stride
    else:
        out_stride = st.stride * 2
        down = st.coords.copy()
        down[:, 1:] = (down[:, 1:] // out_stride) * out_stride
        seen, out_list = set(), []
        for row in down:
            key = tuple(row)
            if key not in seen:
                seen.add(key)
                out_list.append(row)
        out_coords = np.asarray(out_list, dtype=np.int64)
    pairs_in, pairs_out, ptr = [], [], [0]
    for j in range(NUM_OFFSETS):
        delta = OFFSETS[j] * st.stride
        for o, oc in enumerate(out_coords):
            target = oc.copy()
            target[1:] -= delta
            for i, ic in enumerate(st.coords):
                if (ic == target).all():
                    pairs_in.append(i)
                    pairs_out.append(o)
        ptr.append(len(pairs_in))
    return KernelMap(
        pairs_in=np.asarray(pairs_in, dtype=np.int64),
        pairs_out=np.asarray(pairs_out, dtype=np.int64),
        offset_ptr=np.asarray(ptr, dtype=np.int64),
        out_coords=out_coords,
        in_stride=st.stride,
        out_stride=out_stride,
        num_in=st.num_voxels,
        in_coords=st.coords,
    )


def sparse_conv(st, weight, kmap):
    """Sparse convolution of a tensor's features by a (27, C_in, C_out) weight.

    Returns a SparseTensor on the map's output sites. For gradient flow use
    autodiff.sparse_conv_op directly; this wrapper is the plain data path.
    """
    if kmap.num_in != st.num_voxels or kmap.in_stride != st.stride:
        raise ContractError("kernel map was built for a different tensor")
    feats = ad.Tensor(st.features)
    w = weight if isinstance(weight, ad.Tensor) else ad.Tensor(np.asarray(weight))
    out = ad.sparse_conv_op(feats, w, kmap.pairs_in, kmap.pairs_out,
                            kmap.offset_ptr, kmap.num_out)
    return SparseTensor(kmap.out_coords, out.data, stride=kmap.out_stride,
                        voxel_size=st.voxel_size)


def sparse_trilinear_rows(st, coords, table=None):
    """Hash-resolved corner rows and trilinear weights for interpolation.

    Cell centers sit at ((u + stride/2) * voxel_size); corners that miss the
    table (inactive cells) come back as row -1.
    """
    scale = st.voxel_size * st.stride
    g = coords.astype(np.float64) / scale - 0.5
    base = np.floor(g).astype(np.int64)
    frac = g - base
    n = coords.shape[0]
    corner_coords = np.empty((n, 8, 4), dtype=np.int64)
    weights = np.empty((n, 8), dtype=np.float64)
    j = 0
    for bx in (0, 1):
        wx = frac[:, 0] if bx else 1.0 - frac[:, 0]
        for by in (0, 1):
            wy = frac[:, 1] if by else 1.0 - frac[:, 1]
            for bz in (0, 1):
                wz = frac[:, 2] if bz else 1.0 - frac[:, 2]
                corner_coords[:, j, 0] = 0
                corner_coords[:, j, 1] = (base[:, 0] + bx) * st.stride
                corner_coords[:, j, 2] = (base[:, 1] + by) * st.stride
                corner_coords[:, j, 3] = (base[:, 2] + bz) * st.stride
                weights[:, j] = wx * wy * wz
                j += 1
    table = table if table is not None else st.table()
    rows = table.query(corner_coords.reshape(-1, 4)).reshape(n, 8)
    return rows, weights


def sparse_devoxelize_trilinear(st, coords, table=None):
    """Interpolate sparse voxel features at normalized point coordinates.

    Inactive corner cells (hash misses) contribute zero, mirroring the
    dense grid's zero feature at empty voxels.
    """
    rows, weights = sparse_trilinear_rows(st, coords, table)
    return ad.weighted_gather_op(ad.Tensor(st.features), rows, weights).data


class SPVConvBlock(_TwoBranchBlock):
    """Sparse voxel branch at a fixed voxel size plus a point MLP."""

    def __init__(self, in_channels, out_channels, voxel_size, **kwargs):
        if not 0 < voxel_size <= 1:
            raise ContractError(f"voxel_size must be in (0, 1], got {voxel_size}")
        self.voxel_size = float(voxel_size)
        super().__init__(in_channels, out_channels, **kwargs)

    def _build_voxel_conv(self, i, c_in, c_out, k, rng, weights):
        std = np.sqrt(2.0 / (c_in * k ** 3))
        self._param(
            f"voxel.conv{i}.weight",
            lambda ci=c_in, s=std: rng.normal(0.0, s, size=(NUM_OFFSETS, ci, c_out)).astype(self.dtype),
            weights,
        )

    def _voxel_branch(self, coords, feats, training):
        unique_coords, point_to_voxel, table, probes = _voxel_index(
            coords, self.voxel_size, coords.shape[0])
        voxel_feats, _ = ad.scatter_mean_op(feats, point_to_voxel, unique_coords.shape[0])
        st = SparseTensor(unique_coords, voxel_feats.data, stride=1,
                          voxel_size=self.voxel_size, hash_table=table,
                          build_probes=probes)
        kmap = build_kernel_map(st, stride=1)
        h = voxel_feats
        for i in range(self.voxel_depth):
            h = ad.sparse_conv_op(h, self.params[f"voxel.conv{i}.weight"],
                                  kmap.pairs_in, kmap.pairs_out, kmap.offset_ptr,
                                  kmap.num_out)
            if self.use_bn:
                h = ad.batchnorm(h, self.params[f"voxel.bn{i}.gamma"],
                                 self.params[f"voxel.bn{i}.beta"],
                                 self.bn[f"voxel.bn{i}"], training, channel_axis=1)
            h = ad.leaky_relu(h, self.slope)
        rows, weights_ = sparse_trilinear_rows(st, coords)
        return ad.weighted_gather_op(h, rows, weights_)


def spvconv_forward(block, pc):
    """Run one SPVConv block over a normalized cloud."""
    if pc.space != NORMALIZED:
        raise ContractError("spvconv_forward expects a normalized cloud")
    if pc.num_features != block.in_channels:
        raise ShapeError(
            f"cloud has {pc.num_features} feature channels, block expects {block.in_channels}"
        )
    feats = ad.Tensor(np.ascontiguousarray(pc.features, dtype=block.dtype))
    out = block.forward(pc.coords, feats, training=False)
    return pc.with_features(out.data)
