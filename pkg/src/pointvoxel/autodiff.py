"""Dense-tensor arithmetic with reverse-mode differentiation.

Tensors wrap numpy arrays (float32 or float64 per build configuration).
Operations executed while a Tape is active are recorded in execution order;
Tape.backward replays the records in reverse, producing each gradient
exactly once. Tensors are immutable once created; a tape has a single
writer, and independent tapes may run concurrently (the active-tape stack is
thread local).

A process-wide multiply-accumulate counter can be enabled around any code
region; convolution and matmul ops report their useful MAC counts there,
which the architecture-search resource model checks against.
"""

import threading
from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import ContractError, LabelIndexError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)

_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


class Tensor:
    """Immutable n-d array node; `grad` is populated by Tape.backward."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        grad = ", grad" if self.grad is not None else ""
        name = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{grad}{name})"


class _Entry:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of operations; reverse replay yields gradients."""

    def __init__(self):
        self.entries = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def backward(self, root):
        """Accumulate d(root)/d(node) for every node recorded on this tape.

        Sets `.grad` (zero if the node does not influence root) on each
        requires_grad tensor touched by the tape. Can be called repeatedly;
        each call recomputes gradients from scratch.
        """
        grads = {id(root): np.ones_like(root.data)}
        keep = {id(root): root}
        for entry in reversed(self.entries):
            keep[id(entry.out)] = entry.out
            for tensor in entry.inputs:
                keep[id(tensor)] = tensor
            g = grads.get(id(entry.out))
            if g is None:
                continue
            for tensor, contrib in zip(entry.inputs, entry.backward(g)):
                if contrib is None or not tensor.requires_grad:
                    continue
                tid = id(tensor)
                if tid in grads:
                    grads[tid] = grads[tid] + contrib
                else:
                    grads[tid] = contrib
        for tid, tensor in keep.items():
            if tensor.requires_grad:
                tensor.grad = grads.get(tid)
                if tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.data)


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _make(data, inputs, backward):
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    tape = _active_tape()
    if tape is not None and requires:
        tape.entries.append(_Entry(out, list(inputs), backward))
    return out


def _check_same_dtype(*tensors):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"mixed dtypes {sorted(str(d) for d in dtypes)}")


class MacCounter:
    """Accumulates useful multiply-accumulate counts reported by ops."""

    def __init__(self):
        self.total = 0

    def add(self, n):
        self.total += int(n)


_mac_stack = []


@contextmanager
def count_macs():
    """Context manager yielding a MacCounter fed by all ops inside it."""
    counter = MacCounter()
    _mac_stack.append(counter)
    try:
        yield counter
    finally:
        _mac_stack.pop()


def _report_macs(n):
    for counter in _mac_stack:
        counter.add(n)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b):
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a, s):
    s = a.dtype.type(s)
    return _make(a.data * s, (a,), lambda g: (g * s,))


def add_bias(x, b):
    """Add a length-C bias row vector to every row of x (N x C)."""
    _check_same_dtype(x, b)
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: got {x.shape} and {b.shape}")
    return _make(x.data + b.data[None, :], (x, b), lambda g: (g, g.sum(axis=0)))


def abs_(a):
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def exp_(a):
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: (g * out_data,))


def sum_all(a):
    return _make(a.data.sum(dtype=a.dtype), (a,), lambda g: (np.full_like(a.data, g),))


def mean_all(a):
    n = a.data.size
    return _make(
        a.data.mean(dtype=a.dtype),
        (a,),
        lambda g: (np.full_like(a.data, g / a.dtype.type(n)),),
    )


def concat_cols(a, b):
    _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: got {a.shape} and {b.shape}")
    ca = a.shape[1]
    return _make(
        np.concatenate([a.data, b.data], axis=1),
        (a, b),
        lambda g: (np.ascontiguousarray(g[:, :ca]), np.ascontiguousarray(g[:, ca:])),
    )


def tile_rows(v, n):
    """Repeat a length-C vector into an N x C matrix."""
    if v.data.ndim != 1:
        raise ShapeError(f"tile_rows expects a vector, got {v.shape}")
    return _make(np.tile(v.data, (n, 1)), (v,), lambda g: (g.sum(axis=0),))


def max_over_rows(x):
    """Column-wise max over the rows of x (N x C) -> (C,).

    The gradient routes to the first maximal row per column, which keeps
    backward deterministic when values tie.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"max_over_rows expects N x C, got {x.shape}")
    arg = np.argmax(x.data, axis=0)
    cols = np.arange(x.shape[1])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[arg, cols] = g
        return (gx,)

    return _make(x.data[arg, cols], (x,), backward)


def to_grid(x, resolution):
    """Reshape a (r^3, C) voxel table into a (C, r, r, r) grid."""
    r = int(resolution)
    if x.data.ndim != 2 or x.shape[0] != r ** 3:
        raise ShapeError(f"to_grid: expected ({r ** 3}, C), got {x.shape}")
    c = x.shape[1]
    data = np.ascontiguousarray(x.data.T.reshape(c, r, r, r))
    return _make(data, (x,), lambda g: (np.ascontiguousarray(g.reshape(c, -1).T),))


def from_grid(grid):
    """Reshape a (C, r, r, r) grid into an (r^3, C) voxel table."""
    if grid.data.ndim != 4:
        raise ShapeError(f"from_grid: expected (C, r, r, r), got {grid.shape}")
    c = grid.shape[0]
    shape = grid.shape

    def backward(g):
        return (np.ascontiguousarray(g.T.reshape(shape)),)

    return _make(np.ascontiguousarray(grid.data.reshape(c, -1).T), (grid,), backward)


# ---------------------------------------------------------------------------
# linear algebra and convolution


def matmul(a, b):
    _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} x {b.shape}")
    _report_macs(a.shape[0] * a.shape[1] * b.shape[1])

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), backward)


def conv3d_valid_taps(in_dims, k, stride):
    """Number of (output site, kernel tap) pairs that touch a real input cell."""
    pad = (k - 1) // 2
    total = 1
    for d in in_dims:
        d_out = (d - 1) // stride + 1
        per_dim = 0
        for o in range(d_out):
            for t in range(k):
                if 0 <= o * stride + t - pad < d:
                    per_dim += 1
        total *= per_dim
    return total


def conv3d(x, w, stride=1):
    """3D cross-correlation, zero padding (k-1)//2, over (C_in, D, H, W)."""
    _check_same_dtype(x, w)
    if x.data.ndim != 4 or w.data.ndim != 5:
        raise ShapeError(f"conv3d: expected 4-d input and 5-d weight, got {x.shape}, {w.shape}")
    k = w.shape[2]
    if k % 2 == 0:
        raise ContractError(f"conv3d: even kernel size {k} unsupported")
    if w.shape[2:] != (k, k, k):
        raise ShapeError(f"conv3d: kernel must be cubic, got {w.shape[2:]}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv3d: weight expects {w.shape[1]} input channels, input has {x.shape[0]}")
    _report_macs(conv3d_valid_taps(x.shape[1:], k, stride) * x.shape[0] * w.shape[0])
    out_data = kernels.conv3d_fwd(x.data, w.data, stride)

    def backward(g):
        return kernels.conv3d_bwd(x.data, w.data, stride, g)

    return _make(out_data, (x, w), backward)


def leaky_relu(x, slope=0.1):
    slope = x.dtype.type(slope)
    gate = np.where(x.data >= 0, x.dtype.type(1), slope)
    return _make(x.data * gate, (x,), lambda g: (g * gate,))


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormState:
    """Running statistics for one batchnorm layer (mutable, not a graph node)."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def copy(self):
        dup = BatchNormState(self.running_mean.shape[0], self.momentum, self.eps,
                             self.running_mean.dtype)
        dup.running_mean = self.running_mean.copy()
        dup.running_var = self.running_var.copy()
        return dup


def batchnorm(x, gamma, beta, state, training, channel_axis):
    """Normalize per channel; train mode uses batch stats and updates state."""
    _check_same_dtype(x, gamma, beta)
    c = x.shape[channel_axis]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta must have shape ({c},)")
    moved = np.moveaxis(x.data, channel_axis, -1)
    flat_shape = moved.shape
    flat = moved.reshape(-1, c)
    n = flat.shape[0]
    dt = x.dtype.type
    eps = dt(state.eps)

    if training:
        if n < 2:
            raise ContractError(f"batchnorm train mode needs >= 2 samples per channel, got {n}")
        mean = flat.mean(axis=0)
        var = flat.var(axis=0)
        mom = state.running_mean.dtype.type(state.momentum)
        one = state.running_mean.dtype.type(1)
        unbiased = var * dt(n / (n - 1))
        state.running_mean[...] = (one - mom) * state.running_mean + mom * mean
        state.running_var[...] = (one - mom) * state.running_var + mom * unbiased
    else:
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)

    inv_std = dt(1) / np.sqrt(var + eps)
    xhat = (flat - mean) * inv_std
    out_flat = xhat * gamma.data + beta.data
    out_data = np.moveaxis(out_flat.reshape(flat_shape), -1, channel_axis)

    def backward(g):
        g_moved = np.moveaxis(g, channel_axis, -1).reshape(-1, c)
        dgamma = (g_moved * xhat).sum(axis=0)
        dbeta = g_moved.sum(axis=0)
        dxhat = g_moved * gamma.data
        if training:
            dx_flat = (inv_std / dt(n)) * (
                dt(n) * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
            )
        else:
            dx_flat = dxhat * inv_std
        dx = np.moveaxis(dx_flat.reshape(flat_shape), -1, channel_axis)
        return np.ascontiguousarray(dx), dgamma, dbeta

    return _make(np.ascontiguousarray(out_data), (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# loss


def cross_entropy_per_point(logits, labels):
    """Mean over rows of -log softmax(logits)[label], max-subtracted."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects N x K logits, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    bad = (labels < 0) | (labels >= k)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise LabelIndexError(f"label {int(labels[row])} out of range [0, {k}) at row {row}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    losses = lse - z[rows, labels]
    dt = logits.dtype.type

    def backward(g):
        soft = np.exp(z)
        soft /= soft.sum(axis=1, keepdims=True)
        soft[rows, labels] -= dt(1)
        return (soft * (g * dt(1.0 / n)),)

    return _make(losses.mean(dtype=logits.dtype), (logits,), backward)


# ---------------------------------------------------------------------------
# point/voxel data movement (kernel backed)


def scatter_mean_op(feats, rows, num_rows):
    """Average rows of feats (N x C) into num_rows buckets; returns (M x C).

    Differentiable in feats; the bucket assignment is fixed data. Touches
    each input row exactly once.
    """
    if feats.data.ndim != 2:
        raise ShapeError(f"scatter_mean expects N x C features, got {feats.shape}")
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    out_data, counts = kernels.scatter_mean(rows, feats.data, num_rows)
    inv = np.zeros(num_rows, dtype=feats.dtype)
    nz = counts > 0
    inv[nz] = feats.dtype.type(1) / counts[nz].astype(feats.dtype)

    def backward(g):
        return ((g * inv[:, None])[rows],)

    out = _make(out_data, (feats,), backward)
    return out, counts


def weighted_gather_op(table, idx, weights):
    """Trilinear-style gather: out[n] = sum_j w[n, j] * table[idx[n, j]].

    idx entries of -1 contribute zero. Differentiable in table only.
    """
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    weights = np.ascontiguousarray(weights, dtype=table.dtype)
    num_rows = table.shape[0]
    out_data = kernels.weighted_gather(table.data, idx, weights)

    def backward(g):
        return (kernels.weighted_scatter(g, idx, weights, num_rows),)

    return _make(out_data, (table,), backward)


def sparse_conv_op(feats, weight, pairs_in, pairs_out, offset_ptr, num_out):
    """Gather-GEMM-scatter sparse convolution over a prebuilt kernel map."""
    _check_same_dtype(feats, weight)
    if weight.data.ndim != 3 or weight.shape[1] != feats.shape[1]:
        raise ShapeError(
            f"sparse_conv: weight {weight.shape} does not match features {feats.shape}"
        )
    pairs_in = np.ascontiguousarray(pairs_in, dtype=np.int64)
    pairs_out = np.ascontiguousarray(pairs_out, dtype=np.int64)
    offset_ptr = np.ascontiguousarray(offset_ptr, dtype=np.int64)
    _report_macs(pairs_in.shape[0] * feats.shape[1] * weight.shape[2])
    out_data = kernels.sparse_conv_fwd(feats.data, weight.data, pairs_in, pairs_out,
                                       offset_ptr, num_out)

    def backward(g):
        return kernels.sparse_conv_bwd(feats.data, weight.data, pairs_in, pairs_out,
                                       offset_ptr, g)

    return _make(out_data, (feats, weight), backward)
