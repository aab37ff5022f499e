"""Dense point-voxel primitive: voxelization (bucket averaging), trilinear
and nearest devoxelization, and the fused two-branch block."""

import numpy as np
import pytest

import pointvoxel.autodiff as ad
from pointvoxel.cloud import NORMALIZED, PointCloud
from pointvoxel.errors import ContractError, ShapeError
from pointvoxel.pvconv import (DenseVoxelGrid, PVConvBlock, devoxelize_nearest,
                               devoxelize_trilinear, pvconv_forward,
                               trilinear_corners, voxelize)


def cloud(coords, features=None, labels=None):
    coords = np.asarray(coords, dtype=np.float64)
    if features is None:
        features = coords.copy()
    return PointCloud(coords, np.asarray(features, dtype=np.float64), labels, NORMALIZED)


def centers_grid(r):
    """All voxel centers of an r^3 grid, one point per voxel."""
    line = (np.arange(r) + 0.5) / r
    return np.stack(np.meshgrid(line, line, line, indexing="ij"), axis=-1).reshape(-1, 3)


class TestVoxelize:
    def test_single_point(self):
        pc = cloud([[0.1, 0.1, 0.1]], features=[[1.0]])
        grid = voxelize(pc, 2)
        assert grid.features[0, 0, 0, 0] == 1.0
        assert grid.counts[0, 0, 0] == 1
        assert grid.counts.sum() == 1

    def test_two_points_average(self):
        pc = cloud([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2]], features=[[2.0], [4.0]])
        grid = voxelize(pc, 2)
        assert grid.features[0, 0, 0, 0] == 3.0

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_bucket_average_oracle(self, seed):
        rng = np.random.default_rng(seed)
        pc = cloud(rng.random((100, 3)), rng.standard_normal((100, 4)))
        r = 8
        grid = voxelize(pc, r)
        expected = np.zeros((4, r, r, r))
        counts = np.zeros((r, r, r), dtype=np.int64)
        idx = np.clip((pc.coords * r).astype(int), 0, r - 1)
        for k in range(100):
            u, v, w = idx[k]
            expected[:, u, v, w] += pc.features[k]
            counts[u, v, w] += 1
        nz = counts > 0
        expected[:, nz] /= counts[nz]
        assert np.abs(grid.features - expected).max() < 1e-6
        assert np.array_equal(grid.counts, counts)

    def test_empty_voxels_zero_and_counts_total(self):
        rng = np.random.default_rng(2)
        pc = cloud(rng.random((50, 3)) * 0.4, rng.standard_normal((50, 2)))
        grid = voxelize(pc, 8)
        assert grid.counts.sum() == 50  # each point scattered exactly once
        empty = grid.counts == 0
        assert empty.any()
        assert np.all(grid.features[:, empty] == 0)

    def test_requires_normalized(self):
        raw = PointCloud(np.array([[2.0, 0.0, 0.0]]), np.ones((1, 1)))
        with pytest.raises(ContractError):
            voxelize(raw, 4)


class TestTrilinearDevoxelize:
    def test_point_at_center_reads_voxel_verbatim(self):
        rng = np.random.default_rng(0)
        grid = voxelize(cloud(centers_grid(4), rng.standard_normal((64, 3))), 4)
        out = devoxelize_trilinear(grid, np.array([[(1 + 0.5) / 4, (2 + 0.5) / 4, (0 + 0.5) / 4]]))
        assert np.abs(out[0] - grid.features[:, 1, 2, 0]).max() < 1e-6

    def test_constant_grid_interior_partition_of_unity(self):
        r = 4
        grid = DenseVoxelGrid(r, np.full((2, r, r, r), 7.5), np.ones((r, r, r), np.int64))
        rng = np.random.default_rng(1)
        # interior: all 8 corners in range
        pts = 0.5 / r + rng.random((50, 3)) * (1.0 - 1.0 / r)
        out = devoxelize_trilinear(grid, pts)
        assert np.abs(out - 7.5).max() < 1e-6

    def test_hand_computed_eight_term_sum(self):
        rng = np.random.default_rng(3)
        r = 4
        feats = rng.standard_normal((3, r, r, r))
        grid = DenseVoxelGrid(r, feats, np.ones((r, r, r), np.int64))
        p = np.array([[0.40, 0.33, 0.61]])
        g = p[0] * r - 0.5
        base = np.floor(g).astype(int)
        frac = g - base
        expected = np.zeros(3)
        for bx in (0, 1):
            for by in (0, 1):
                for bz in (0, 1):
                    w = ((frac[0] if bx else 1 - frac[0])
                         * (frac[1] if by else 1 - frac[1])
                         * (frac[2] if bz else 1 - frac[2]))
                    c = base + np.array([bx, by, bz])
                    expected += w * feats[:, c[0], c[1], c[2]]
        out = devoxelize_trilinear(grid, p)
        assert np.abs(out[0] - expected).max() < 1e-6

    def test_out_of_range_corners_contribute_zero(self):
        r = 2
        grid = DenseVoxelGrid(r, np.ones((1, r, r, r)), np.ones((r, r, r), np.int64))
        out = devoxelize_trilinear(grid, np.array([[0.0, 0.0, 0.0]]))
        # only 1 of 8 corners is in range, each axis weight 0.5
        assert abs(out[0, 0] - 0.125) < 1e-9

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(4)
        _, weights = trilinear_corners(rng.random((100, 3)), 8)
        assert np.abs(weights.sum(axis=1) - 1.0).max() < 1e-12


class TestNearestDevoxelize:
    def test_same_voxel_points_share_features(self):
        rng = np.random.default_rng(5)
        grid = voxelize(cloud(rng.random((40, 3)), rng.standard_normal((40, 2))), 4)
        pts = np.array([[0.26, 0.30, 0.27], [0.27, 0.26, 0.30]])  # same cell at r=4
        out = devoxelize_nearest(grid, pts)
        assert np.array_equal(out[0], out[1])

    def test_center_matches_trilinear(self):
        rng = np.random.default_rng(6)
        grid = voxelize(cloud(centers_grid(4), rng.standard_normal((64, 2))), 4)
        pts = centers_grid(4)[20:30]
        near = devoxelize_nearest(grid, pts)
        tri = devoxelize_trilinear(grid, pts)
        assert np.abs(near - tri).max() < 1e-6

    def test_matches_direct_index_oracle(self):
        rng = np.random.default_rng(7)
        grid = voxelize(cloud(rng.random((60, 3)), rng.standard_normal((60, 3))), 4)
        pts = rng.random((25, 3))
        out = devoxelize_nearest(grid, pts)
        idx = np.clip((pts * 4).astype(int), 0, 3)
        expected = np.stack([grid.features[:, u, v, w] for u, v, w in idx])
        assert np.array_equal(out, expected)


class TestPVConvBlock:
    def _one_point_per_voxel_cloud(self, r, channels, rng):
        coords = centers_grid(r)
        feats = rng.random((coords.shape[0], channels)) + 0.5  # positive
        return cloud(coords, feats)

    def test_zero_voxel_weights_reduce_to_point_branch(self):
        rng = np.random.default_rng(8)
        block = PVConvBlock(3, 5, resolution=4, dtype=np.float64,
                            rng=np.random.default_rng(0))
        for i in range(block.voxel_depth):
            block.params[f"voxel.conv{i}.weight"].data[...] = 0.0
        pc = cloud(rng.random((30, 3)), rng.standard_normal((30, 3)))
        out = pvconv_forward(block, pc)
        point_only = block._point_branch(
            ad.Tensor(pc.features, dtype=np.float64), training=False)
        assert np.abs(out.features - point_only.data).max() < 1e-12

    def test_identity_composition_doubles_features(self):
        # identity point branch (square MLP = I, positive inputs), delta
        # voxel kernel, one point per voxel at the centers: out = 2 * input
        rng = np.random.default_rng(9)
        r, c = 4, 3
        block = PVConvBlock(c, c, resolution=r, voxel_depth=1, use_bn=False,
                            dtype=np.float64, rng=np.random.default_rng(0))
        w = np.zeros((c, c, 3, 3, 3))
        for ch in range(c):
            w[ch, ch, 1, 1, 1] = 1.0
        block.params["voxel.conv0.weight"].data[...] = w
        block.params["point.lin0.weight"].data[...] = np.eye(c)
        block.params["point.lin0.bias"].data[...] = 0.0
        pc = self._one_point_per_voxel_cloud(r, c, rng)
        out = pvconv_forward(block, pc)
        assert np.abs(out.features - 2.0 * pc.features).max() < 1e-9

    def test_coordinates_and_point_count_preserved(self):
        rng = np.random.default_rng(10)
        block = PVConvBlock(2, 6, resolution=4)
        pc = cloud(rng.random((17, 3)), rng.standard_normal((17, 2)))
        out = pvconv_forward(block, pc)
        assert out.num_points == 17
        assert np.array_equal(out.coords, pc.coords)
        assert out.num_features == 6

    def test_channel_mismatch_rejected(self):
        block = PVConvBlock(4, 4, resolution=4)
        pc = cloud(np.random.default_rng(0).random((10, 3)))
        with pytest.raises(ShapeError):
            pvconv_forward(block, pc)

    @pytest.mark.parametrize("seed", range(5))
    def test_block_gradients_vs_finite_differences(self, seed, fd_check):
        rng = np.random.default_rng(600 + seed)
        block = PVConvBlock(2, 3, resolution=3, dtype=np.float64,
                            rng=np.random.default_rng(seed))
        pc = cloud(rng.random((10, 3)), rng.standard_normal((10, 2)))
        feats = ad.Tensor(pc.features, dtype=np.float64)
        labels = rng.integers(0, 3, size=10)

        def forward():
            out = block.forward(pc.coords, feats, training=True)
            return ad.cross_entropy_per_point(out, labels)

        fd_check(list(block.params.values()), forward)

    def test_voxelize_devoxelize_constant_field_interior(self):
        rng = np.random.default_rng(11)
        r = 4
        interior = 0.5 / r + rng.random((200, 3)) * (1.0 - 1.0 / r)
        pc = cloud(interior, np.full((200, 2), 3.25))
        # every voxel must be occupied for the constant field to survive
        pc = cloud(np.concatenate([interior, centers_grid(r)]),
                   np.full((200 + r ** 3, 2), 3.25))
        grid = voxelize(pc, r)
        out = devoxelize_trilinear(grid, interior)
        assert np.abs(out - 3.25).max() < 1e-6

    def test_forward_invariant_to_point_order(self):
        rng = np.random.default_rng(12)
        block = PVConvBlock(3, 4, resolution=4, dtype=np.float64,
                            rng=np.random.default_rng(1))
        pc = cloud(rng.random((40, 3)), rng.standard_normal((40, 3)))
        out = pvconv_forward(block, pc)
        perm = rng.permutation(40)
        pc_perm = cloud(pc.coords[perm], pc.features[perm])
        out_perm = pvconv_forward(block, pc_perm)
        assert np.abs(out_perm.features - out.features[perm]).max() < 1e-9
