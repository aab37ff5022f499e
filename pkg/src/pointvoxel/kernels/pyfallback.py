"""Pure-numpy implementations of the hot kernels.

This backend is the reference the native extension is checked against and
the fallback used when the extension is unavailable. All functions must be
deterministic: accumulations run in ascending element order so that results
are reproducible bit for bit on a given backend.

Hash tables use open addressing with linear probing over 64-bit FNV-1a of
the packed coordinate key. Insertion here is resolved in vectorized rounds
rather than point by point, which can place keys in different slots than a
sequential insert would; the observable outputs (row ids in first-occurrence
order, hit/miss answers) are identical either way.
"""

import numpy as np

NAME = "python"

FNV_OFFSET = np.uint64(0xCBF29CE484222325)
FNV_PRIME = np.uint64(0x100000001B3)

_COORD_BIAS = 32768
_PROBE_LIMIT = 128


def pack_coords(coords):
    """Pack int coordinates (N x 4, each in [-32768, 32767]) into uint64 keys."""
    c = np.asarray(coords, dtype=np.int64)
    if c.ndim != 2 or c.shape[1] != 4:
        raise ValueError(f"expected N x 4 coordinates, got shape {c.shape}")
    if c.min(initial=0) < -_COORD_BIAS or c.max(initial=0) > _COORD_BIAS - 1:
        raise ValueError("coordinate outside the packable range [-32768, 32767]")
    u = (c + _COORD_BIAS).astype(np.uint64)
    return (u[:, 0] << np.uint64(48)) | (u[:, 1] << np.uint64(32)) | (u[:, 2] << np.uint64(16)) | u[:, 3]


def fnv1a_u64(keys):
    """FNV-1a over the 8 little-endian bytes of each uint64 key."""
    keys = np.asarray(keys, dtype=np.uint64)
    h = np.full(keys.shape, FNV_OFFSET, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for i in range(8):
            byte = (keys >> np.uint64(8 * i)) & np.uint64(0xFF)
            h = (h ^ byte) * FNV_PRIME
    return h


def _capacity_for(n):
    cap = 8
    while cap < 2 * max(n, 1):
        cap *= 2
    return cap


def hash_insert_unique(keys, capacity=None):
    """Insert keys, assigning row ids in first-occurrence order.

    Returns (slot_key, slot_row, row_of, is_new, n_unique, probes). slot_row
    holds -1 for empty slots. Duplicate keys resolve to the first insertion.
    """
    keys = np.asarray(keys, dtype=np.uint64)
    n = keys.shape[0]
    cap = _capacity_for(n) if capacity is None else int(capacity)
    while True:
        result = _insert_rounds(keys, cap)
        if result is not None:
            return result
        cap *= 2


def _insert_rounds(keys, cap):
    n = keys.shape[0]
    mask = np.uint64(cap - 1)
    h = fnv1a_u64(keys)
    slot_key = np.zeros(cap, dtype=np.uint64)
    # claimant point index per slot; -1 means empty
    slot_pt = np.full(cap, -1, dtype=np.int64)
    owner_slot = np.full(n, -1, dtype=np.int64)
    is_new = np.zeros(n, dtype=bool)
    pending = np.arange(n, dtype=np.int64)
    off = np.zeros(n, dtype=np.uint64)
    probes = 0
    while pending.size:
        if int(off.max(initial=0)) > _PROBE_LIMIT:
            return None  # rebuild at larger capacity
        slots = ((h[pending] + off[pending]) & mask).astype(np.int64)
        probes += pending.size
        occupant = slot_pt[slots]
        hit = (occupant >= 0) & (slot_key[slots] == keys[pending])
        owner_slot[pending[hit]] = slots[hit]
        empty = occupant < 0
        if empty.any():
            cand = pending[empty]
            cand_slots = slots[empty]
            order = np.argsort(cand_slots, kind="stable")  # keeps point order per slot
            cs, cp = cand_slots[order], cand[order]
            first = np.ones(cs.size, dtype=bool)
            first[1:] = cs[1:] != cs[:-1]
            winners, wslots = cp[first], cs[first]
            slot_pt[wslots] = winners
            slot_key[wslots] = keys[winners]
            is_new[winners] = True
            owner_slot[winners] = wslots
        unresolved = pending[owner_slot[pending] < 0]
        if unresolved.size:
            # a claim this round may have filled the slot with the same key
            uslots = ((h[unresolved] + off[unresolved]) & mask).astype(np.int64)
            late_hit = (slot_pt[uslots] >= 0) & (slot_key[uslots] == keys[unresolved])
            owner_slot[unresolved[late_hit]] = uslots[late_hit]
            advancing = unresolved[~late_hit]
            off[advancing] += np.uint64(1)
            pending = advancing
        else:
            pending = unresolved
    # row ids by first occurrence in point order
    claimants = np.flatnonzero(is_new)
    slot_row = np.full(cap, -1, dtype=np.int64)
    slot_row[owner_slot[claimants]] = np.arange(claimants.size, dtype=np.int64)
    row_of = slot_row[owner_slot]
    return slot_key, slot_row, row_of, is_new, int(claimants.size), probes


def hash_query(slot_key, slot_row, queries):
    """Look up keys in a built table; returns (rows with -1 for miss, probes)."""
    queries = np.asarray(queries, dtype=np.uint64)
    cap = slot_key.shape[0]
    mask = np.uint64(cap - 1)
    h = fnv1a_u64(queries)
    rows = np.full(queries.shape[0], -1, dtype=np.int64)
    pending = np.arange(queries.shape[0], dtype=np.int64)
    off = np.uint64(0)
    probes = 0
    while pending.size:
        slots = ((h[pending] + off) & mask).astype(np.int64)
        probes += pending.size
        occupied = slot_row[slots] >= 0
        hit = occupied & (slot_key[slots] == queries[pending])
        rows[pending[hit]] = slot_row[slots[hit]]
        pending = pending[occupied & ~hit]  # miss on empty slot, continue on mismatch
        off += np.uint64(1)
    return rows, probes


def scatter_mean(rows, feats, num_rows):
    """Average feature rows into buckets; empty buckets stay zero.

    Accumulation order is ascending point index (np.add.at is unbuffered and
    sequential), matching the native loop bit for bit.
    """
    feats = np.ascontiguousarray(feats)
    sums = np.zeros((num_rows, feats.shape[1]), dtype=feats.dtype)
    counts = np.zeros(num_rows, dtype=np.int64)
    np.add.at(sums, rows, feats)
    np.add.at(counts, rows, 1)
    nz = counts > 0
    sums[nz] /= counts[nz, None].astype(feats.dtype)
    return sums, counts


def gather_rows(table, rows):
    """Gather rows from a table; row -1 yields a zero row."""
    out = np.zeros((rows.shape[0], table.shape[1]), dtype=table.dtype)
    valid = rows >= 0
    out[valid] = table[rows[valid]]
    return out


def weighted_gather(table, idx, weights):
    """out[n] = sum_c weights[n, c] * table[idx[n, c]], idx -1 contributing zero."""
    n, corners = idx.shape
    out = np.zeros((n, table.shape[1]), dtype=table.dtype)
    for c in range(corners):
        rows = idx[:, c]
        valid = rows >= 0
        if valid.any():
            out[valid] += weights[valid, c, None].astype(table.dtype) * table[rows[valid]]
    return out


def weighted_scatter(grad_out, idx, weights, num_rows):
    """Adjoint of weighted_gather: scatter-accumulate into the table."""
    grad_table = np.zeros((num_rows, grad_out.shape[1]), dtype=grad_out.dtype)
    for c in range(idx.shape[1]):
        rows = idx[:, c]
        valid = rows >= 0
        if valid.any():
            np.add.at(grad_table, rows[valid], weights[valid, c, None].astype(grad_out.dtype) * grad_out[valid])
    return grad_table


def conv3d_fwd(x, w, stride):
    """Dense 3D cross-correlation with zero padding of (k-1)//2."""
    k = w.shape[2]
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride]
    return np.tensordot(w, win, axes=([1, 2, 3, 4], [0, 4, 5, 6]))


def conv3d_bwd(x, w, stride, grad_out):
    """Gradients of conv3d_fwd w.r.t. input and weight."""
    k = w.shape[2]
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride]
    grad_w = np.tensordot(grad_out, win, axes=([1, 2, 3], [1, 2, 3]))
    do, ho, wo = grad_out.shape[1:]
    grad_xp = np.zeros_like(xp)
    for a in range(k):
        for b in range(k):
            for c in range(k):
                tap = np.tensordot(w[:, :, a, b, c], grad_out, axes=([0], [0]))
                grad_xp[:,
                        a:a + stride * (do - 1) + 1:stride,
                        b:b + stride * (ho - 1) + 1:stride,
                        c:c + stride * (wo - 1) + 1:stride] += tap
    d = x.shape[1:]
    grad_x = grad_xp[:, pad:pad + d[0], pad:pad + d[1], pad:pad + d[2]]
    return np.ascontiguousarray(grad_x), grad_w


def sparse_conv_fwd(feats, weight, pairs_in, pairs_out, offset_ptr, num_out):
    """Gather-GEMM-scatter sparse convolution forward.

    pairs are grouped per kernel offset (CSR layout via offset_ptr). Within
    one offset no output row repeats, so plain fancy-index accumulation is
    exact; offsets are processed in ascending order for determinism.
    """
    out = np.zeros((num_out, weight.shape[2]), dtype=feats.dtype)
    for j in range(offset_ptr.shape[0] - 1):
        lo, hi = offset_ptr[j], offset_ptr[j + 1]
        if hi > lo:
            out[pairs_out[lo:hi]] += feats[pairs_in[lo:hi]] @ weight[j]
    return out


def sparse_conv_bwd(feats, weight, pairs_in, pairs_out, offset_ptr, grad_out):
    """Gradients of sparse_conv_fwd w.r.t. features and weight.

    Within one offset input rows are as unique as output rows (in = out - d
    is injective), so fancy-index accumulation is exact here too.
    """
    grad_feats = np.zeros_like(feats)
    grad_weight = np.zeros_like(weight)
    for j in range(offset_ptr.shape[0] - 1):
        lo, hi = offset_ptr[j], offset_ptr[j + 1]
        if hi > lo:
            gi, go = pairs_in[lo:hi], pairs_out[lo:hi]
            grad_feats[gi] += grad_out[go] @ weight[j].T
            grad_weight[j] += feats[gi].T @ grad_out[go]
    return grad_feats, grad_weight


def gather_flat(src, idx):
    """1D gather used by the memory-access benchmark."""
    return np.take(src, idx)
