"""Native kernels: sequential open-addressed hashing, scatter/gather, and
the dense/sparse convolution inner loops.

Semantics match pointvoxel.kernels.pyfallback: row ids in first-occurrence
order, accumulation in ascending element order, kernel taps outside the grid
skipped. Probe counts may differ from the fallback (slot layout is insertion
-order dependent) but stay within the same O(m+n) bound.
"""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.stdint cimport int64_t, uint8_t, uint64_t

cnp.import_array()

NAME = "native"

ctypedef fused floating:
    float
    double

cdef enum:
    PROBE_LIMIT = 128


cdef inline uint64_t _fnv1a_one(uint64_t key) nogil:
    cdef uint64_t h = <uint64_t>0xCBF29CE484222325
    cdef int i
    for i in range(8):
        h = (h ^ ((key >> (8 * i)) & <uint64_t>0xFF)) * <uint64_t>0x100000001B3
    return h


def fnv1a_u64(keys):
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] k = np.ascontiguousarray(keys, dtype=np.uint64)
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] out = np.empty(k.shape[0], dtype=np.uint64)
    cdef Py_ssize_t i
    for i in range(k.shape[0]):
        out[i] = _fnv1a_one(k[i])
    return out


def _capacity_for(n):
    cap = 8
    while cap < 2 * max(n, 1):
        cap *= 2
    return cap


def hash_insert_unique(keys, capacity=None):
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] k = np.ascontiguousarray(keys, dtype=np.uint64)
    cap = _capacity_for(k.shape[0]) if capacity is None else int(capacity)
    while True:
        out = _insert_seq(k, cap)
        if out is not None:
            return out
        cap *= 2


def _insert_seq(cnp.ndarray[cnp.uint64_t, ndim=1] keys, int64_t cap):
    cdef int64_t n = keys.shape[0]
    cdef uint64_t mask = <uint64_t>(cap - 1)
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] slot_key = np.zeros(cap, dtype=np.uint64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] slot_row = np.full(cap, -1, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] row_of = np.empty(n, dtype=np.int64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] is_new = np.zeros(n, dtype=np.uint8)
    cdef int64_t probes = 0, next_row = 0, i, off
    cdef uint64_t key, s
    for i in range(n):
        key = keys[i]
        s = _fnv1a_one(key) & mask
        off = 0
        while True:
            probes += 1
            if slot_row[s] < 0:
                slot_key[s] = key
                slot_row[s] = next_row
                row_of[i] = next_row
                is_new[i] = 1
                next_row += 1
                break
            if slot_key[s] == key:
                row_of[i] = slot_row[s]
                break
            off += 1
            if off > PROBE_LIMIT:
                return None
            s = (s + 1) & mask
    return slot_key, slot_row, row_of, is_new.astype(bool), int(next_row), int(probes)


def hash_query(slot_key_arr, slot_row_arr, queries):
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] slot_key = np.ascontiguousarray(slot_key_arr, dtype=np.uint64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] slot_row = np.ascontiguousarray(slot_row_arr, dtype=np.int64)
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] q = np.ascontiguousarray(queries, dtype=np.uint64)
    cdef int64_t nq = q.shape[0]
    cdef uint64_t mask = <uint64_t>(slot_key.shape[0] - 1)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] rows = np.full(nq, -1, dtype=np.int64)
    cdef int64_t probes = 0, i
    cdef uint64_t key, s
    for i in range(nq):
        key = q[i]
        s = _fnv1a_one(key) & mask
        while True:
            probes += 1
            if slot_row[s] < 0:
                break
            if slot_key[s] == key:
                rows[i] = slot_row[s]
                break
            s = (s + 1) & mask
    return rows, int(probes)


@cython.boundscheck(False)
@cython.wraparound(False)
def scatter_mean(rows_arr, feats_arr, int64_t num_rows):
    rows_arr = np.ascontiguousarray(rows_arr, dtype=np.int64)
    feats_arr = np.ascontiguousarray(feats_arr)
    sums = np.zeros((num_rows, feats_arr.shape[1]), dtype=feats_arr.dtype)
    counts = np.zeros(num_rows, dtype=np.int64)
    if feats_arr.dtype == np.float32:
        _scatter_mean_impl[float](rows_arr, feats_arr, sums, counts)
    else:
        _scatter_mean_impl[double](rows_arr, feats_arr, sums, counts)
    return sums, counts


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _scatter_mean_impl(int64_t[::1] rows, floating[:, ::1] feats,
                             floating[:, ::1] sums, int64_t[::1] counts):
    cdef int64_t n = rows.shape[0], c = feats.shape[1], i, j, r
    for i in range(n):
        r = rows[i]
        counts[r] += 1
        for j in range(c):
            sums[r, j] += feats[i, j]
    for r in range(sums.shape[0]):
        if counts[r] > 0:
            for j in range(c):
                sums[r, j] /= <floating>counts[r]


def gather_rows(table_arr, rows_arr):
    rows_arr = np.ascontiguousarray(rows_arr, dtype=np.int64)
    table_arr = np.ascontiguousarray(table_arr)
    out = np.zeros((rows_arr.shape[0], table_arr.shape[1]), dtype=table_arr.dtype)
    if table_arr.dtype == np.float32:
        _gather_rows_impl[float](table_arr, rows_arr, out)
    else:
        _gather_rows_impl[double](table_arr, rows_arr, out)
    return out


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _gather_rows_impl(floating[:, ::1] table, int64_t[::1] rows, floating[:, ::1] out):
    cdef int64_t i, j, r
    for i in range(rows.shape[0]):
        r = rows[i]
        if r >= 0:
            for j in range(table.shape[1]):
                out[i, j] = table[r, j]


def weighted_gather(table_arr, idx_arr, weights_arr):
    table_arr = np.ascontiguousarray(table_arr)
    idx_arr = np.ascontiguousarray(idx_arr, dtype=np.int64)
    weights_arr = np.ascontiguousarray(weights_arr, dtype=table_arr.dtype)
    out = np.zeros((idx_arr.shape[0], table_arr.shape[1]), dtype=table_arr.dtype)
    if table_arr.dtype == np.float32:
        _weighted_gather_impl[float](table_arr, idx_arr, weights_arr, out)
    else:
        _weighted_gather_impl[double](table_arr, idx_arr, weights_arr, out)
    return out


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _weighted_gather_impl(floating[:, ::1] table, int64_t[:, ::1] idx,
                                floating[:, ::1] weights, floating[:, ::1] out):
    cdef int64_t n = idx.shape[0], corners = idx.shape[1], c = table.shape[1]
    cdef int64_t i, j, k, r
    cdef floating w
    for j in range(corners):
        for i in range(n):
            r = idx[i, j]
            if r >= 0:
                w = weights[i, j]
                for k in range(c):
                    out[i, k] += w * table[r, k]


def weighted_scatter(grad_out_arr, idx_arr, weights_arr, int64_t num_rows):
    grad_out_arr = np.ascontiguousarray(grad_out_arr)
    idx_arr = np.ascontiguousarray(idx_arr, dtype=np.int64)
    weights_arr = np.ascontiguousarray(weights_arr, dtype=grad_out_arr.dtype)
    grad_table = np.zeros((num_rows, grad_out_arr.shape[1]), dtype=grad_out_arr.dtype)
    if grad_out_arr.dtype == np.float32:
        _weighted_scatter_impl[float](grad_out_arr, idx_arr, weights_arr, grad_table)
    else:
        _weighted_scatter_impl[double](grad_out_arr, idx_arr, weights_arr, grad_table)
    return grad_table


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _weighted_scatter_impl(floating[:, ::1] grad_out, int64_t[:, ::1] idx,
                                 floating[:, ::1] weights, floating[:, ::1] grad_table):
    cdef int64_t n = idx.shape[0], corners = idx.shape[1], c = grad_out.shape[1]
    cdef int64_t i, j, k, r
    cdef floating w
    for j in range(corners):
        for i in range(n):
            r = idx[i, j]
            if r >= 0:
                w = weights[i, j]
                for k in range(c):
                    grad_table[r, k] += w * grad_out[i, k]


def conv3d_fwd(x_arr, w_arr, int stride):
    x_arr = np.ascontiguousarray(x_arr)
    w_arr = np.ascontiguousarray(w_arr, dtype=x_arr.dtype)
    cdef int k = w_arr.shape[2]
    cdef int pad = (k - 1) // 2
    dims_out = [(d - 1) // stride + 1 for d in x_arr.shape[1:]]
    out = np.zeros((w_arr.shape[0],) + tuple(dims_out), dtype=x_arr.dtype)
    if x_arr.dtype == np.float32:
        _conv3d_fwd_impl[float](x_arr, w_arr, out, stride, pad)
    else:
        _conv3d_fwd_impl[double](x_arr, w_arr, out, stride, pad)
    return out


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _conv3d_fwd_impl(floating[:, :, :, ::1] x, floating[:, :, :, :, ::1] w,
                           floating[:, :, :, ::1] out, int stride, int pad):
    cdef int cin = x.shape[0], d = x.shape[1], h = x.shape[2], ww = x.shape[3]
    cdef int cout = out.shape[0], do = out.shape[1], ho = out.shape[2], wo = out.shape[3]
    cdef int k = w.shape[2]
    cdef int i, j, l, a, b, c, ci, co, xi, xj, xl
    cdef floating v
    for i in range(do):
        for j in range(ho):
            for l in range(wo):
                for a in range(k):
                    xi = i * stride + a - pad
                    if xi < 0 or xi >= d:
                        continue
                    for b in range(k):
                        xj = j * stride + b - pad
                        if xj < 0 or xj >= h:
                            continue
                        for c in range(k):
                            xl = l * stride + c - pad
                            if xl < 0 or xl >= ww:
                                continue
                            for ci in range(cin):
                                v = x[ci, xi, xj, xl]
                                for co in range(cout):
                                    out[co, i, j, l] += w[co, ci, a, b, c] * v


def conv3d_bwd(x_arr, w_arr, int stride, grad_out_arr):
    x_arr = np.ascontiguousarray(x_arr)
    w_arr = np.ascontiguousarray(w_arr, dtype=x_arr.dtype)
    grad_out_arr = np.ascontiguousarray(grad_out_arr, dtype=x_arr.dtype)
    cdef int k = w_arr.shape[2]
    cdef int pad = (k - 1) // 2
    grad_x = np.zeros_like(x_arr)
    grad_w = np.zeros_like(w_arr)
    if x_arr.dtype == np.float32:
        _conv3d_bwd_impl[float](x_arr, w_arr, grad_out_arr, grad_x, grad_w, stride, pad)
    else:
        _conv3d_bwd_impl[double](x_arr, w_arr, grad_out_arr, grad_x, grad_w, stride, pad)
    return grad_x, grad_w


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _conv3d_bwd_impl(floating[:, :, :, ::1] x, floating[:, :, :, :, ::1] w,
                           floating[:, :, :, ::1] grad_out,
                           floating[:, :, :, ::1] grad_x, floating[:, :, :, :, ::1] grad_w,
                           int stride, int pad):
    cdef int cin = x.shape[0], d = x.shape[1], h = x.shape[2], ww = x.shape[3]
    cdef int cout = grad_out.shape[0], do = grad_out.shape[1], ho = grad_out.shape[2], wo = grad_out.shape[3]
    cdef int k = w.shape[2]
    cdef int i, j, l, a, b, c, ci, co, xi, xj, xl
    cdef floating g
    for i in range(do):
        for j in range(ho):
            for l in range(wo):
                for a in range(k):
                    xi = i * stride + a - pad
                    if xi < 0 or xi >= d:
                        continue
                    for b in range(k):
                        xj = j * stride + b - pad
                        if xj < 0 or xj >= h:
                            continue
                        for c in range(k):
                            xl = l * stride + c - pad
                            if xl < 0 or xl >= ww:
                                continue
                            for co in range(cout):
                                g = grad_out[co, i, j, l]
                                for ci in range(cin):
                                    grad_x[ci, xi, xj, xl] += w[co, ci, a, b, c] * g
                                    grad_w[co, ci, a, b, c] += x[ci, xi, xj, xl] * g


def sparse_conv_fwd(feats_arr, weight_arr, pairs_in_arr, pairs_out_arr, offset_ptr_arr, int64_t num_out):
    feats_arr = np.ascontiguousarray(feats_arr)
    weight_arr = np.ascontiguousarray(weight_arr, dtype=feats_arr.dtype)
    pairs_in_arr = np.ascontiguousarray(pairs_in_arr, dtype=np.int64)
    pairs_out_arr = np.ascontiguousarray(pairs_out_arr, dtype=np.int64)
    offset_ptr_arr = np.ascontiguousarray(offset_ptr_arr, dtype=np.int64)
    out = np.zeros((num_out, weight_arr.shape[2]), dtype=feats_arr.dtype)
    if feats_arr.dtype == np.float32:
        _sparse_conv_fwd_impl[float](feats_arr, weight_arr, pairs_in_arr, pairs_out_arr, offset_ptr_arr, out)
    else:
        _sparse_conv_fwd_impl[double](feats_arr, weight_arr, pairs_in_arr, pairs_out_arr, offset_ptr_arr, out)
    return out


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _sparse_conv_fwd_impl(floating[:, ::1] feats, floating[:, :, ::1] weight,
                                int64_t[::1] pairs_in, int64_t[::1] pairs_out,
                                int64_t[::1] offset_ptr, floating[:, ::1] out):
    cdef int64_t n_off = offset_ptr.shape[0] - 1
    cdef int64_t cin = feats.shape[1], cout = out.shape[1]
    cdef int64_t j, p, i, o, ci, co
    cdef floating v
    for j in range(n_off):
        for p in range(offset_ptr[j], offset_ptr[j + 1]):
            i = pairs_in[p]
            o = pairs_out[p]
            for ci in range(cin):
                v = feats[i, ci]
                for co in range(cout):
                    out[o, co] += v * weight[j, ci, co]


def sparse_conv_bwd(feats_arr, weight_arr, pairs_in_arr, pairs_out_arr, offset_ptr_arr, grad_out_arr):
    feats_arr = np.ascontiguousarray(feats_arr)
    weight_arr = np.ascontiguousarray(weight_arr, dtype=feats_arr.dtype)
    grad_out_arr = np.ascontiguousarray(grad_out_arr, dtype=feats_arr.dtype)
    pairs_in_arr = np.ascontiguousarray(pairs_in_arr, dtype=np.int64)
    pairs_out_arr = np.ascontiguousarray(pairs_out_arr, dtype=np.int64)
    offset_ptr_arr = np.ascontiguousarray(offset_ptr_arr, dtype=np.int64)
    grad_feats = np.zeros_like(feats_arr)
    grad_weight = np.zeros_like(weight_arr)
    if feats_arr.dtype == np.float32:
        _sparse_conv_bwd_impl[float](feats_arr, weight_arr, pairs_in_arr, pairs_out_arr,
                                     offset_ptr_arr, grad_out_arr, grad_feats, grad_weight)
    else:
        _sparse_conv_bwd_impl[double](feats_arr, weight_arr, pairs_in_arr, pairs_out_arr,
                                      offset_ptr_arr, grad_out_arr, grad_feats, grad_weight)
    return grad_feats, grad_weight


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _sparse_conv_bwd_impl(floating[:, ::1] feats, floating[:, :, ::1] weight,
                                int64_t[::1] pairs_in, int64_t[::1] pairs_out,
                                int64_t[::1] offset_ptr, floating[:, ::1] grad_out,
                                floating[:, ::1] grad_feats, floating[:, :, ::1] grad_weight):
    cdef int64_t n_off = offset_ptr.shape[0] - 1
    cdef int64_t cin = feats.shape[1], cout = grad_out.shape[1]
    cdef int64_t j, p, i, o, ci, co
    cdef floating g, v
    for j in range(n_off):
        for p in range(offset_ptr[j], offset_ptr[j + 1]):
            i = pairs_in[p]
            o = pairs_out[p]
            for ci in range(cin):
                v = feats[i, ci]
                g = 0
                for co in range(cout):
                    g += grad_out[o, co] * weight[j, ci, co]
                    grad_weight[j, ci, co] += v * grad_out[o, co]
                grad_feats[i, ci] += g


def gather_flat(src_arr, idx_arr):
    src_arr = np.ascontiguousarray(src_arr)
    idx_arr = np.ascontiguousarray(idx_arr, dtype=np.int64)
    out = np.empty(idx_arr.shape[0], dtype=src_arr.dtype)
    if src_arr.dtype == np.float32:
        _gather_flat_impl[float](src_arr, idx_arr, out)
    else:
        _gather_flat_impl[double](src_arr, idx_arr, out)
    return out


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _gather_flat_impl(floating[::1] src, int64_t[::1] idx, floating[::1] out):
    cdef int64_t i
    for i in range(idx.shape[0]):
        out[i] = src[idx[i]]
