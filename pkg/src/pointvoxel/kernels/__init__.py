"""Kernel backend selection.

The hot inner loops (hashing, scatter/gather, convolutions) exist twice:
a compiled Cython extension (`pointvoxel.kernels._core`) and a pure-numpy
fallback (`pointvoxel.kernels.pyfallback`). The native backend is used when
the extension imported successfully; set POINTVOXEL_KERNELS=python|native
before import, or call set_backend(), to override. `pointvoxel bench
backends` compares the two.
"""

import os

from . import pyfallback

try:
    from . import _core as _native
except ImportError:
    _native = None

_BACKENDS = {"python": pyfallback}
if _native is not None:
    _BACKENDS["native"] = _native

_env = os.environ.get("POINTVOXEL_KERNELS", "")
if _env:
    if _env not in _BACKENDS:
        raise ImportError(
            f"POINTVOXEL_KERNELS={_env!r} but available backends are {sorted(_BACKENDS)}"
        )
    _active = _BACKENDS[_env]
else:
    _active = _BACKENDS.get("native", pyfallback)

# packing is cheap vector arithmetic; one shared implementation
pack_coords = pyfallback.pack_coords


def available_backends():
    return sorted(_BACKENDS)


def backend_name():
    return _active.NAME


def get_backend(name=None):
    if name is None:
        return _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {sorted(_BACKENDS)}")
    return _BACKENDS[name]


def set_backend(name):
    """Switch the process-wide kernel backend; returns the previous name."""
    global _active
    previous = _active.NAME
    _active = get_backend(name)
    return previous


def fnv1a_u64(keys):
    return _active.fnv1a_u64(keys)


def hash_insert_unique(keys, capacity=None):
    return _active.hash_insert_unique(keys, capacity)


def hash_query(slot_key, slot_row, queries):
    return _active.hash_query(slot_key, slot_row, queries)


def scatter_mean(rows, feats, num_rows):
    return _active.scatter_mean(rows, feats, num_rows)


def gather_rows(table, rows):
    return _active.gather_rows(table, rows)


def weighted_gather(table, idx, weights):
    return _active.weighted_gather(table, idx, weights)


def weighted_scatter(grad_out, idx, weights, num_rows):
    return _active.weighted_scatter(grad_out, idx, weights, num_rows)


def conv3d_fwd(x, w, stride):
    return _active.conv3d_fwd(x, w, stride)


def conv3d_bwd(x, w, stride, grad_out):
    return _active.conv3d_bwd(x, w, stride, grad_out)


def sparse_conv_fwd(feats, weight, pairs_in, pairs_out, offset_ptr, num_out):
    return _active.sparse_conv_fwd(feats, weight, pairs_in, pairs_out, offset_ptr, num_out)


def sparse_conv_bwd(feats, weight, pairs_in, pairs_out, offset_ptr, grad_out):
    return _active.sparse_conv_bwd(feats, weight, pairs_in, pairs_out, offset_ptr, grad_out)


def gather_flat(src, idx):
    return _active.gather_flat(src, idx)
