"""Versioned binary checkpoint container.

Layout (all little-endian):
    magic   "PVNASCKPT" (9 bytes)
    version u32
    count   u32
    entry*  name_len u16, name utf-8, dtype_tag u8, rank u8,
            dims u64[rank], raw row-major data

Round trips are bit exact. Entries are written in insertion order of the
mapping supplied by the caller.
"""

import struct

import numpy as np

from .errors import FileFormatError

MAGIC = b"PVNASCKPT"
VERSION = 1

_DTYPE_TAGS = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("<u4"): 3,
}
_TAG_DTYPES = {tag: dt for dt, tag in _DTYPE_TAGS.items()}


def save_checkpoint(path, arrays):
    """Write a mapping of name -> ndarray to a checkpoint file."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            if not arr.flags["C_CONTIGUOUS"]:
                arr = np.ascontiguousarray(arr)  # keeps 0-d arrays 0-d
            dt = arr.dtype.newbyteorder("<")
            if dt not in _DTYPE_TAGS:
                raise FileFormatError(f"unsupported checkpoint dtype {arr.dtype} for {name!r}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", _DTYPE_TAGS[dt], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype(dt, copy=False).tobytes())


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise FileFormatError(f"truncated checkpoint: expected {n} bytes for {what}")
    return data


def load_checkpoint(path):
    """Read a checkpoint file back into a dict of name -> ndarray."""
    arrays = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC), "magic") != MAGIC:
            raise FileFormatError(f"{path}: not a checkpoint file (bad magic)")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != VERSION:
            raise FileFormatError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            tag, rank = struct.unpack("<BB", _read_exact(fh, 2, "entry header"))
            if tag not in _TAG_DTYPES:
                raise FileFormatError(f"{path}: unknown dtype tag {tag} for {name!r}")
            dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "dims"))
            dt = _TAG_DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize if rank else dt.itemsize
            raw = _read_exact(fh, nbytes, f"data of {name!r}")
            arrays[name] = np.frombuffer(raw, dtype=dt).reshape(dims).copy()
    return arrays
