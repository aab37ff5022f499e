"""Point-cloud data model and tooling.

A cloud is a set of (coordinate, feature) pairs with optional per-point
labels. Coordinates live either in raw scene units or normalized to the
unit cube; normalization centers on the gravity center, scales by the
maximum point norm, and maps [-1, 1]^3 affinely onto [0, 1]^3.

Also here: the sole-occupancy analysis (how many points remain
distinguishable after voxelization at a given resolution), a deterministic
synthetic labeled-scene generator used in place of benchmark datasets, and
the `.pvpc` file format.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, FileFormatError, ShapeError

RAW = "raw"
NORMALIZED = "normalized"

_DEGENERATE_EPS = 1e-12


@dataclass(frozen=True)
class PointCloud:
    coords: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None
    space: str = RAW

    def __post_init__(self):
        coords = np.asarray(self.coords)
        features = np.asarray(self.features)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ShapeError(f"coords must be N x 3, got {coords.shape}")
        if coords.shape[0] < 1:
            raise ContractError("a point cloud needs at least one point")
        if features.ndim != 2 or features.shape[0] != coords.shape[0]:
            raise ShapeError(
                f"features must pair with coords rows: {features.shape} vs {coords.shape}"
            )
        if not np.isfinite(coords).all():
            raise ContractError("coords must be finite")
        if self.space not in (RAW, NORMALIZED):
            raise ContractError(f"unknown space flag {self.space!r}")
        if self.space == NORMALIZED:
            if coords.min() < -1e-6 or coords.max() > 1 + 1e-6:
                raise ContractError("normalized coords must lie in [0, 1]")
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (coords.shape[0],):
                raise ShapeError(f"labels must be length N, got {labels.shape}")
            object.__setattr__(self, "labels", labels.astype(np.int64))
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", features)

    @property
    def num_points(self):
        return self.coords.shape[0]

    @property
    def num_features(self):
        return self.features.shape[1]

    def with_features(self, features):
        return PointCloud(self.coords, features, self.labels, self.space)


@dataclass
class SceneBatch:
    """A list of clouds sharing feature width and label vocabulary."""

    clouds: list
    num_classes: int
    class_names: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        widths = {pc.num_features for pc in self.clouds}
        if len(widths) > 1:
            raise ContractError(f"clouds disagree on feature width: {sorted(widths)}")
        spaces = {pc.space for pc in self.clouds}
        if len(spaces) > 1:
            raise ContractError("clouds mix raw and normalized spaces")

    def __iter__(self):
        return iter(self.clouds)

    def __len__(self):
        return len(self.clouds)


def normalize(pc):
    """Map a raw cloud onto the unit cube.

    Subtract the gravity center, divide by the maximum point norm (unit
    sphere), then map [-1, 1]^3 to [0, 1]^3 via p/2 + 0.5. Coincident points
    degenerate to the cube center instead of faulting.
    """
    if pc.space != RAW:
        raise ContractError("normalize expects a raw-space cloud")
    centered = pc.coords - pc.coords.mean(axis=0)
    max_norm = np.linalg.norm(centered, axis=1).max()
    if max_norm < _DEGENERATE_EPS:
        unit = np.zeros_like(centered)
    else:
        unit = centered / max_norm
    mapped = np.clip(unit / 2 + 0.5, 0.0, 1.0)
    return PointCloud(mapped.astype(pc.coords.dtype), pc.features, pc.labels, NORMALIZED)


def voxel_indices(coords, resolution):
    """floor(p * r) clamped to [0, r-1] per axis (p == 1.0 maps to r-1)."""
    idx = np.floor(coords * resolution).astype(np.int64)
    return np.clip(idx, 0, resolution - 1)


def count_distinguishable(pc, resolution):
    """Count points that are sole occupants of their voxel at a resolution.

    Returns (count, fraction of the cloud).
    """
    if pc.space != NORMALIZED:
        raise ContractError("count_distinguishable expects a normalized cloud")
    if resolution < 1:
        raise ContractError(f"resolution must be >= 1, got {resolution}")
    idx = voxel_indices(pc.coords, resolution)
    flat = (idx[:, 0] * resolution + idx[:, 1]) * resolution + idx[:, 2]
    _, inverse, counts = np.unique(flat, return_inverse=True, return_counts=True)
    sole = int((counts[inverse] == 1).sum())
    return sole, sole / pc.num_points


# ---------------------------------------------------------------------------
# synthetic scenes

PRIMITIVE_KINDS = ("plane", "sphere", "box", "pole")

_DEFAULT_POINTS = {"plane": 160, "sphere": 96, "box": 96, "pole": 80}


@dataclass
class SceneConfig:
    """Which primitives to drop into a scene and how large the scene is.

    primitives maps a kind to the number of instances; the label of a point
    is the index of its kind in the config's insertion order.
    """

    primitives: dict
    extent: float = 10.0
    points_per_instance: dict = field(default_factory=dict)
    jitter: float = 0.002

    def __post_init__(self):
        if not self.primitives:
            raise ConfigError("scene config names no primitive classes")
        for kind in self.primitives:
            if kind not in PRIMITIVE_KINDS:
                raise ConfigError(f"unknown primitive kind {kind!r}; choose from {PRIMITIVE_KINDS}")
        if self.extent <= 0:
            raise ConfigError("extent must be positive")

    @property
    def class_names(self):
        return tuple(self.primitives)

    @property
    def num_classes(self):
        return len(self.primitives)


def _points_plane(rng, extent, n, jitter):
    xy = rng.uniform(0.05 * extent, 0.95 * extent, size=(n, 2))
    z0 = rng.uniform(0.04 * extent, 0.22 * extent)
    z = z0 + rng.normal(0.0, jitter * extent, size=(n, 1))
    return np.concatenate([xy, z], axis=1)


def _points_sphere(rng, extent, n, jitter):
    radius = rng.uniform(0.06 * extent, 0.13 * extent)
    center = rng.uniform(0.2 * extent, 0.8 * extent, size=3)
    direction = rng.normal(size=(n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    noise = rng.normal(0.0, jitter * extent, size=(n, 1))
    return center + direction * (radius + noise)


def _points_box(rng, extent, n, jitter):
    half = rng.uniform(0.05 * extent, 0.11 * extent, size=3)
    center = rng.uniform(0.2 * extent, 0.8 * extent, size=3)
    axis = rng.integers(0, 3, size=n)
    side = rng.choice([-1.0, 1.0], size=n)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    pts[np.arange(n), axis] = side * half[axis]
    pts += rng.normal(0.0, jitter * extent, size=(n, 3))
    return center + pts


def _points_pole(rng, extent, n, jitter):
    # thin, dense vertical cluster: occupies very few voxels at coarse grids
    base = rng.uniform(0.15 * extent, 0.85 * extent, size=2)
    height = rng.uniform(0.25 * extent, 0.45 * extent)
    z = rng.uniform(0.0, height, size=(n, 1))
    radial = rng.normal(0.0, 0.004 * extent, size=(n, 2))
    return np.concatenate([base + radial, z], axis=1)


_GENERATORS = {
    "plane": _points_plane,
    "sphere": _points_sphere,
    "box": _points_box,
    "pole": _points_pole,
}


def generate_synthetic_scene(config, seed):
    """Deterministically build a labeled raw-space cloud from a config."""
    rng = np.random.default_rng(seed)
    chunks, labels = [], []
    for label, (kind, instances) in enumerate(config.primitives.items()):
        n = config.points_per_instance.get(kind, _DEFAULT_POINTS[kind])
        for _ in range(int(instances)):
            pts = _GENERATORS[kind](rng, config.extent, n, config.jitter)
            chunks.append(pts)
            labels.append(np.full(pts.shape[0], label, dtype=np.int64))
    coords = np.concatenate(chunks, axis=0).astype(np.float32)
    labels = np.concatenate(labels)
    return PointCloud(coords, coords.copy(), labels, RAW)


# ---------------------------------------------------------------------------
# .pvpc file format

_PVPC_MAGIC = b"PVPC"
_PVPC_VERSION = 1
_FLAG_LABELS = 1
_FLAG_NORMALIZED = 2


def save_pvpc(path, pc):
    """Write a cloud to a .pvpc file (little-endian, f32 payload)."""
    coords = np.ascontiguousarray(pc.coords, dtype="<f4")
    features = np.ascontiguousarray(pc.features, dtype="<f4")
    flags = 0
    if pc.labels is not None:
        flags |= _FLAG_LABELS
    if pc.space == NORMALIZED:
        flags |= _FLAG_NORMALIZED
    with open(path, "wb") as fh:
        fh.write(_PVPC_MAGIC)
        fh.write(struct.pack("<IQII", _PVPC_VERSION, pc.num_points, pc.num_features, flags))
        fh.write(coords.tobytes())
        fh.write(features.tobytes())
        if pc.labels is not None:
            fh.write(np.ascontiguousarray(pc.labels, dtype="<u4").tobytes())


def _read_exact(fh, n, what, path):
    data = fh.read(n)
    if len(data) != n:
        raise FileFormatError(f"{path}: truncated reading {what}")
    return data


def load_pvpc(path):
    """Read a .pvpc file back into a PointCloud."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic", path) != _PVPC_MAGIC:
            raise FileFormatError(f"{path}: not a .pvpc file (bad magic)")
        version, n, c, flags = struct.unpack("<IQII", _read_exact(fh, 20, "header", path))
        if version != _PVPC_VERSION:
            raise FileFormatError(f"{path}: unsupported .pvpc version {version}")
        coords = np.frombuffer(_read_exact(fh, n * 3 * 4, "coords", path), dtype="<f4")
        features = np.frombuffer(_read_exact(fh, n * c * 4, "features", path), dtype="<f4")
        labels = None
        if flags & _FLAG_LABELS:
            labels = np.frombuffer(_read_exact(fh, n * 4, "labels", path), dtype="<u4")
            labels = labels.astype(np.int64)
        space = NORMALIZED if flags & _FLAG_NORMALIZED else RAW
    return PointCloud(coords.reshape(n, 3).copy(), features.reshape(n, c).copy(), labels, space)
