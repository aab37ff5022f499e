"""Point-voxel convolution primitives (dense and sparse), a weight-sharing
architecture search, and CPU efficiency benchmarks for 3D point clouds."""

__version__ = "0.1.0"

from . import errors  # noqa: F401
from .autodiff import BatchNormState, MacCounter, Tape, Tensor, count_macs  # noqa: F401
from .cloud import (PointCloud, SceneBatch, SceneConfig, count_distinguishable,  # noqa: F401
                    generate_synthetic_scene, load_pvpc, normalize, save_pvpc)
from .pvconv import (DenseVoxelGrid, PVConvBlock, devoxelize_nearest,  # noqa: F401
                     devoxelize_trilinear, pvconv_forward, voxelize)
from .sparse import (CoordHashTable, KernelMap, SparseTensor, SPVConvBlock,  # noqa: F401
                     build_hash, build_kernel_map, sparse_conv,
                     sparse_devoxelize_trilinear, sparse_voxelize, spvconv_forward)
