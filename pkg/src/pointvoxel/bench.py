"""Desk-scale efficiency benchmarks.

Every cell reports the median and interquartile range of at least five
timed repetitions (after warmup); single runs are never reported. Where
two implementations are compared, their outputs are asserted equal before
any timing. Reports render as plain-text tables and CSV
(benchmark, params..., median_ns, iqr_ns).

Published energy-cost estimates put an off-chip DRAM access near 640 pJ
versus roughly 3 pJ for an arithmetic operation; commodity desks cannot
measure that directly, so the access-pattern report cites the figure in
prose and measures only throughput.
"""

import csv
import platform
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__, kernels
from .cloud import NORMALIZED, PointCloud, SceneConfig, generate_synthetic_scene
from .errors import ContractError
from .pvconv import PVConvBlock, pvconv_forward
from .sparse import SPVConvBlock, naive_sparse_voxelize, sparse_voxelize, spvconv_forward
from .train import prepare_scene

DRAM_ENERGY_NOTE = ("DRAM access energy (~640 pJ) vs arithmetic (~3 pJ) is cited "
                    "from published estimates, not measured here.")

MIN_REPEATS = 5


@dataclass
class BenchCell:
    params: dict
    median_ns: float = float("nan")
    iqr_ns: float = float("nan")
    repeats: int = 0
    flagged: bool = False
    note: str = ""


@dataclass
class BenchReport:
    benchmark: str
    cells: list = field(default_factory=list)
    environment: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    notes: str = ""

    def param_names(self):
        names = []
        for cell in self.cells:
            for key in cell.params:
                if key not in names:
                    names.append(key)
        return names

    def to_csv(self, path):
        names = self.param_names()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["benchmark"] + names + ["median_ns", "iqr_ns", "repeats", "flagged", "note"])
            for cell in self.cells:
                writer.writerow(
                    [self.benchmark]
                    + [cell.params.get(k, "") for k in names]
                    + [f"{cell.median_ns:.1f}", f"{cell.iqr_ns:.1f}", cell.repeats,
                       int(cell.flagged), cell.note]
                )

    def to_text(self):
        names = self.param_names()
        header = names + ["median_ns", "iqr_ns", "reps", "note"]
        rows = [
            [str(cell.params.get(k, "")) for k in names]
            + [f"{cell.median_ns:,.0f}", f"{cell.iqr_ns:,.0f}", str(cell.repeats),
               ("FLAGGED " if cell.flagged else "") + cell.note]
            for cell in self.cells
        ]
        widths = [max(len(header[i]), *(len(r[i]) for r in rows)) if rows else len(header[i])
                  for i in range(len(header))]
        lines = [f"== {self.benchmark} =="]
        lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
        lines.append("  ".join("-" * w for w in widths))
        for r in rows:
            lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)))
        for key, value in self.extra.items():
            lines.append(f"{key}: {value}")
        if self.notes:
            lines.append(self.notes)
        env = ", ".join(f"{k}={v}" for k, v in self.environment.items())
        lines.append(f"[{env}]")
        return "\n".join(lines)


def environment_fingerprint():
    cpu = platform.processor() or ""
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.lower().startswith("model name"):
                    cpu = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return {
        "cpu": cpu or "unknown",
        "kernel_backend": kernels.backend_name(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "pointvoxel": __version__,
        "platform": sys.platform,
    }


def time_fn(fn, repeats=MIN_REPEATS, warmup=3):
    """Median and IQR of wall time in nanoseconds over `repeats` runs."""
    repeats = max(repeats, MIN_REPEATS)
    for _ in range(warmup):
        fn()
    times = np.empty(repeats)
    for i in range(repeats):
        start = time.perf_counter_ns()
        fn()
        times[i] = time.perf_counter_ns() - start
    q25, q50, q75 = np.percentile(times, [25, 50, 75])
    return float(q50), float(q75 - q25)


def _fit_loglog_slope(xs, ys):
    return float(np.polyfit(np.log(np.asarray(xs, dtype=np.float64)),
                            np.log(np.asarray(ys, dtype=np.float64)), 1)[0])


def bench_access_pattern(array_bytes=64 * 2 ** 20, index_count=2 ** 22, seed=0,
                         repeats=MIN_REPEATS):
    """Gather throughput with sequential vs uniform-random indices.

    The array should exceed the last-level cache (configurable via
    array_bytes) so the random pattern actually pays for DRAM trips.
    """
    n = array_bytes // 4
    src = np.random.default_rng(seed).random(n, dtype=np.float32)
    report = BenchReport("access_pattern", environment=environment_fingerprint(),
                         notes=DRAM_ENERGY_NOTE)
    report.extra["array_bytes"] = array_bytes
    if index_count == 0:
        for pattern in ("sequential", "random"):
            report.cells.append(BenchCell({"pattern": pattern, "indices": 0},
                                          flagged=True, note="zero-work cell, not timed"))
        return report
    rng = np.random.default_rng(seed)
    seq_idx = np.arange(index_count, dtype=np.int64) % n
    rand_idx = rng.integers(0, n, size=index_count, dtype=np.int64)
    for pattern, idx in (("sequential", seq_idx), ("random", rand_idx)):
        median, iqr = time_fn(lambda idx=idx: kernels.gather_flat(src, idx), repeats)
        throughput = index_count * 4 / (median / 1e9) / 2 ** 30
        report.cells.append(BenchCell({"pattern": pattern, "indices": index_count},
                                      median, iqr, max(repeats, MIN_REPEATS),
                                      note=f"{throughput:.2f} GiB/s"))
    seq = report.cells[0].median_ns
    rand = report.cells[1].median_ns
    report.extra["random_over_sequential"] = rand / seq
    return report


def bench_memory_model(resolutions=(2, 4, 8, 16, 32, 64), channels=1, batch=1,
                       points=1000, seed=0):
    """Analytic dense-grid bytes against measured distinguishable fractions.

    Bytes follow batch * C * r^3 * 4 exactly (the cubic growth law); the
    fraction of sole-occupant points is measured on a generated scene.
    """
    if list(resolutions) != sorted(resolutions):
        raise ContractError("resolution sweep must be sorted")
    rng = np.random.default_rng(seed)
    coords = rng.random((points, 3))
    pc = PointCloud(coords, coords.copy(), space=NORMALIZED)
    from .cloud import count_distinguishable

    report = BenchReport("memory_model", environment=environment_fingerprint())
    for r in resolutions:
        grid_bytes = batch * channels * r ** 3 * 4
        _, fraction = count_distinguishable(pc, r)
        report.cells.append(BenchCell(
            {"resolution": r, "channels": channels, "batch": batch,
             "grid_bytes": grid_bytes, "distinguishable_fraction": round(fraction, 6)},
            median_ns=0.0, iqr_ns=0.0, repeats=MIN_REPEATS,
            note="analytic bytes; fraction measured"))
    report.extra["bytes_ratio_per_doubling"] = 8
    return report


def _crossover_blocks(channels, resolution, seed):
    pv = PVConvBlock(channels, channels, resolution, dtype=np.float32,
                     rng=np.random.default_rng(seed))
    spv = SPVConvBlock(channels, channels, 1.0 / resolution, dtype=np.float32,
                       rng=np.random.default_rng(seed))
    return pv, spv


def bench_primitive_crossover(point_count=4096, resolutions=(4, 6, 8, 12, 16, 24, 32),
                              channels=16, seed=0, repeats=MIN_REPEATS):
    """Latency of the dense vs sparse primitive across voxel resolutions.

    Fits log-log growth exponents and reports the first resolution where the
    sparse primitive is faster (the crossover), if any.
    """
    rng = np.random.default_rng(seed)
    coords = rng.random((point_count, 3)).astype(np.float32)
    feats = rng.standard_normal((point_count, channels)).astype(np.float32)
    pc = PointCloud(coords, feats, space=NORMALIZED)
    report = BenchReport("primitive_crossover", environment=environment_fingerprint())
    pv_medians, spv_medians = [], []
    for r in resolutions:
        pv, spv = _crossover_blocks(channels, r, seed)
        pv_med, pv_iqr = time_fn(lambda: pvconv_forward(pv, pc), repeats)
        spv_med, spv_iqr = time_fn(lambda: spvconv_forward(spv, pc), repeats)
        pv_medians.append(pv_med)
        spv_medians.append(spv_med)
        report.cells.append(BenchCell({"primitive": "pvconv", "resolution": r,
                                       "points": point_count, "channels": channels},
                                      pv_med, pv_iqr, max(repeats, MIN_REPEATS)))
        report.cells.append(BenchCell({"primitive": "spvconv", "resolution": r,
                                       "points": point_count, "channels": channels},
                                      spv_med, spv_iqr, max(repeats, MIN_REPEATS)))
    crossover = None
    for r, pv_med, spv_med in zip(resolutions, pv_medians, spv_medians):
        if spv_med < pv_med:
            crossover = r
            break
    if len(resolutions) >= 2:
        upper = max(2, len(resolutions) // 2)
        report.extra["pvconv_slope"] = _fit_loglog_slope(resolutions[-upper:],
                                                         pv_medians[-upper:])
        report.extra["spvconv_slope"] = _fit_loglog_slope(resolutions[-upper:],
                                                          spv_medians[-upper:])
    report.extra["crossover_resolution"] = crossover
    return report


def bench_hash_vs_naive(point_counts=(1_000, 10_000, 100_000), resolution=64,
                        seed=0, repeats=MIN_REPEATS):
    """Hash-indexed sparse voxelization against the O(mn) linear search.

    Outputs are asserted identical before timing each cell. The sweep should
    span at least two decades so the fitted exponents mean something.
    """
    counts = sorted(point_counts)
    if counts[-1] / counts[0] < 100:
        raise ContractError("point-count sweep must span at least two decades")
    voxel_size = 1.0 / resolution
    rng = np.random.default_rng(seed)
    report = BenchReport("hash_vs_naive", environment=environment_fingerprint())
    hash_medians, naive_medians = [], []
    for n in counts:
        coords = rng.random((n, 3))
        pc = PointCloud(coords, np.ones((n, 1), dtype=np.float32), space=NORMALIZED)
        st_h, p2v_h = sparse_voxelize(pc, voxel_size)
        st_n, p2v_n = naive_sparse_voxelize(pc, voxel_size)
        if not (np.array_equal(p2v_h, p2v_n) and np.array_equal(st_h.coords, st_n.coords)
                and np.array_equal(st_h.features, st_n.features)):
            raise AssertionError("hash and naive voxelization disagree; refusing to time")
        naive_reps = repeats if n < 50_000 else MIN_REPEATS
        h_med, h_iqr = time_fn(lambda: sparse_voxelize(pc, voxel_size), repeats)
        n_med, n_iqr = time_fn(lambda: naive_sparse_voxelize(pc, voxel_size),
                               naive_reps, warmup=1)
        hash_medians.append(h_med)
        naive_medians.append(n_med)
        report.cells.append(BenchCell({"method": "hash", "points": n,
                                       "voxels": st_h.num_voxels},
                                      h_med, h_iqr, max(repeats, MIN_REPEATS)))
        report.cells.append(BenchCell({"method": "naive", "points": n,
                                       "voxels": st_n.num_voxels},
                                      n_med, n_iqr, max(naive_reps, MIN_REPEATS),
                                      note=f"speedup {n_med / h_med:.1f}x"))
    report.extra["hash_exponent"] = _fit_loglog_slope(counts, hash_medians)
    report.extra["naive_exponent"] = _fit_loglog_slope(counts, naive_medians)
    report.extra["speedup_at_max_n"] = naive_medians[-1] / hash_medians[-1]
    return report


def bench_backends(seed=0, repeats=MIN_REPEATS):
    """Native extension vs pure-numpy fallback on the hot kernels.

    Each pair is checked for output agreement before timing. With only one
    backend available the report carries a note instead of comparisons.
    """
    report = BenchReport("backend_compare", environment=environment_fingerprint())
    backends = kernels.available_backends()
    if len(backends) < 2:
        report.notes = f"only {backends} available; nothing to compare"
        return report
    py = kernels.get_backend("python")
    nat = kernels.get_backend("native")
    rng = np.random.default_rng(seed)

    n = 100_000
    coords = rng.integers(0, 64, size=(n, 4))
    coords[:, 0] = 0
    keys = kernels.pack_coords(coords)
    res_py = py.hash_insert_unique(keys)
    res_nat = nat.hash_insert_unique(keys)
    assert np.array_equal(res_py[2], res_nat[2]), "hash backends disagree"
    cases = {
        "hash_insert_100k": (lambda b=py: py.hash_insert_unique(keys),
                             lambda: nat.hash_insert_unique(keys)),
        "hash_query_100k": (lambda: py.hash_query(res_py[0], res_py[1], keys),
                            lambda: nat.hash_query(res_nat[0], res_nat[1], keys)),
    }
    feats = rng.standard_normal((n, 16)).astype(np.float32)
    rows = res_py[2]
    m = res_py[4]
    s_py = py.scatter_mean(rows, feats, m)
    s_nat = nat.scatter_mean(rows, feats, m)
    assert np.array_equal(s_py[0], s_nat[0]), "scatter backends disagree"
    cases["scatter_mean_100k"] = (lambda: py.scatter_mean(rows, feats, m),
                                  lambda: nat.scatter_mean(rows, feats, m))
    x = rng.standard_normal((16, 16, 16, 16)).astype(np.float32)
    w = rng.standard_normal((16, 16, 3, 3, 3)).astype(np.float32)
    assert np.allclose(py.conv3d_fwd(x, w, 1), nat.conv3d_fwd(x, w, 1), atol=1e-3)
    cases["conv3d_16c_16r"] = (lambda: py.conv3d_fwd(x, w, 1),
                               lambda: nat.conv3d_fwd(x, w, 1))
    src = rng.random(2 ** 22, dtype=np.float32)
    idx = rng.integers(0, src.size, size=2 ** 20)
    assert np.array_equal(py.gather_flat(src, idx), nat.gather_flat(src, idx))
    cases["gather_1M"] = (lambda: py.gather_flat(src, idx),
                          lambda: nat.gather_flat(src, idx))
    for name, (py_fn, nat_fn) in cases.items():
        for backend, fn in (("python", py_fn), ("native", nat_fn)):
            median, iqr = time_fn(fn, repeats)
            report.cells.append(BenchCell({"kernel": name, "backend": backend},
                                          median, iqr, max(repeats, MIN_REPEATS)))
    return report


def default_bench_scene(points=4096, seed=0):
    config = SceneConfig(primitives={"plane": 1, "sphere": 2, "box": 2, "pole": 3})
    pc = generate_synthetic_scene(config, seed)
    return prepare_scene(pc)
