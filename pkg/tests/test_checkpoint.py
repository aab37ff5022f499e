"""Checkpoint container: bit-exact round trips and typed failure modes."""

import struct

import numpy as np
import pytest

from pointvoxel.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from pointvoxel.errors import FileFormatError


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "conv.weight": rng.standard_normal((4, 3, 3, 3, 3)).astype(np.float32),
        "bn.running_mean": rng.standard_normal(8),
        "epoch": np.asarray([7], dtype=np.int64),
        "labels": rng.integers(0, 9, size=5).astype(np.uint32),
        "scalar": np.asarray(2.5, dtype=np.float64),
    }
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, arrays)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(arrays)
    for name in arrays:
        assert loaded[name].dtype == arrays[name].dtype
        assert np.array_equal(loaded[name], arrays[name])
        assert loaded[name].tobytes() == arrays[name].tobytes()


def test_double_round_trip_identical_bytes(tmp_path):
    arrays = {"w": np.arange(12, dtype=np.float32).reshape(3, 4)}
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, arrays)
    save_checkpoint(p2, load_checkpoint(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT!" + b"\x00" * 16)
    with pytest.raises(FileFormatError, match="magic"):
        load_checkpoint(path)


def test_truncated_file(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, {"w": np.ones((100, 100), dtype=np.float32)})
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(FileFormatError, match="truncated"):
        load_checkpoint(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "model.ckpt"
    path.write_bytes(MAGIC + struct.pack("<II", 99, 0))
    with pytest.raises(FileFormatError, match="version"):
        load_checkpoint(path)


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(FileFormatError, match="dtype"):
        save_checkpoint(tmp_path / "x.ckpt", {"c": np.zeros(3, dtype=np.complex128)})
