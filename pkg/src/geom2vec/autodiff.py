"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and records the operations applied to
it on a tape of parent links.  Calling :meth:`Tensor.backward` on a scalar
result walks the tape in reverse topological order and accumulates gradients
into every tensor created with ``requires_grad=True``.

The op set is deliberately small: elementwise arithmetic, broadcasting-aware
reductions, (batched) matmul, gather/scatter for graph message passing, a
symmetric eigendecomposition, and the nonlinearities used by the models in
this package.  Everything runs in the dtype of its inputs; tests use float64.
"""

from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "concat",
    "stack",
    "matmul",
    "take0",
    "segment_sum",
    "eigh",
    "alloc_stats",
    "reset_alloc_stats",
]

_GRAD_ENABLED = True

# Live/peak byte counters over tensor payloads, used by the benchmark
# instrumentation.  Views share buffers, so this is an upper estimate.
_ALLOC = {"live": 0, "peak": 0}


def reset_alloc_stats():
    _ALLOC["live"] = 0
    _ALLOC["peak"] = 0


def alloc_stats():
    """Return (live_bytes, peak_bytes) since the last reset."""
    return _ALLOC["live"], _ALLOC["peak"]


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """An ndarray with an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "_nbytes")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()
        self._nbytes = self.data.nbytes
        _ALLOC["live"] += self._nbytes
        if _ALLOC["live"] > _ALLOC["peak"]:
            _ALLOC["peak"] = _ALLOC["live"]

    def __del__(self):
        try:
            _ALLOC["live"] -= self._nbytes
        except Exception:
            pass

    # -- bookkeeping ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Backpropagate from this tensor.

        ``grad`` defaults to ones (for scalar losses this is the usual seed).
        """
        if grad is None:
            grad = np.ones_like(self.data)
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                topo.append(node)
            else:
                stack.append((node, True))
                for p in node._parents:
                    if id(p) not in seen:
                        stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- method forms ------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` by summing broadcast axes."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _make(data, parents, backward):
    """Create an op output tensor, wiring the tape when gradients are on."""
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- elementwise and broadcasting ops ---------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def power(a, exponent):
    a = _as_tensor(a)
    exponent = float(exponent)
    data = a.data**exponent

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return _make(data, (a,), backward)


def exp(a):
    a = _as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data)

    return _make(data, (a,), backward)


def log(a):
    a = _as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(data, (a,), backward)


def sqrt(a):
    a = _as_tensor(a)
    data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / data)

    return _make(data, (a,), backward)


def sigmoid(a):
    a = _as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), backward)


def silu(a):
    """x * sigmoid(x)."""
    a = _as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * s

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * s * (1.0 + a.data * (1.0 - s)))

    return _make(data, (a,), backward)


def clamp_min(a, lo):
    """max(a, lo); gradient flows only where a > lo."""
    a = _as_tensor(a)
    lo = float(lo)
    data = np.maximum(a.data, lo)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > lo))

    return _make(data, (a,), backward)


# -- reductions ---------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.data.shape))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(gg, a.data.shape))

    return _make(data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def vector_norm(a, axis):
    """Euclidean norm along ``axis``; gradient is x/||x|| (0 at the origin)."""
    a = _as_tensor(a)
    data = np.sqrt(np.sum(a.data * a.data, axis=axis))

    def backward(g):
        if a.requires_grad:
            denom = np.expand_dims(np.where(data > 0.0, data, 1.0), axis)
            mask = np.expand_dims(data > 0.0, axis)
            a._accumulate(np.expand_dims(g, axis) * a.data / denom * mask)

    return _make(data, (a,), backward)


def logsumexp(a, axis=-1, keepdims=False):
    a = _as_tensor(a)
    amax = np.max(a.data, axis=axis, keepdims=True)
    shifted = np.exp(a.data - amax)
    total = shifted.sum(axis=axis, keepdims=True)
    data = np.log(total) + amax
    soft = shifted / total
    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def backward(g):
        if a.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(gg * soft)

    return _make(data, (a,), backward)


def softmax(a, axis=-1):
    a = _as_tensor(a)
    amax = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - amax)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * data).sum(axis=axis, keepdims=True)
            a._accumulate(data * (g - inner))

    return _make(data, (a,), backward)


# -- shape ops ----------------------------------------------------------------


def reshape(a, shape):
    a = _as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _make(data, (a,), backward)


def swapaxes(a, ax1, ax2):
    a = _as_tensor(a)
    data = np.swapaxes(a.data, ax1, ax2)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.swapaxes(g, ax1, ax2))

    return _make(data, (a,), backward)


def getitem(a, idx):
    a = _as_tensor(a)
    data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accumulate(full)

    return _make(data, (a,), backward)


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(data, tuple(tensors), backward)


def stack(tensors, axis=0):
    return concat([reshape(t, t.data.shape[:axis] + (1,) + t.data.shape[axis:]) for t in tensors], axis=axis)


# -- linear algebra -----------------------------------------------------------


def matmul(a, b):
    """Batched matrix product with broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    # promote 1-D operands so the backward pass only sees matrices
    if a.data.ndim == 1 and b.data.ndim == 1:
        return reshape(matmul(reshape(a, (1, -1)), reshape(b, (-1, 1))), ())
    if a.data.ndim == 1:
        out = matmul(reshape(a, (1, -1)), b)
        return reshape(out, out.data.shape[:-2] + out.data.shape[-1:])
    if b.data.ndim == 1:
        out = matmul(a, reshape(b, (-1, 1)))
        return reshape(out, out.data.shape[:-1])
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), backward)


def eigh(a):
    """Eigendecomposition of a symmetric matrix; returns (eigenvalues, eigenvectors).

    The backward pass uses the standard spectral formula and masks
    near-degenerate eigenvalue pairs (spacing < 1e-12) to keep gradients
    finite; callers should avoid relying on gradients at exact degeneracies.
    """
    a = _as_tensor(a)
    w, u = np.linalg.eigh(a.data)

    delta = w[None, :] - w[:, None]
    mask = np.abs(delta) > 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(mask, 1.0 / np.where(mask, delta, 1.0), 0.0)

    def backward_w(g):
        if a.requires_grad:
            grad = (u * g[None, :]) @ u.T
            a._accumulate(0.5 * (grad + grad.T))

    def backward_u(g):
        if a.requires_grad:
            inner = f * (u.T @ g)
            grad = u @ inner @ u.T
            a._accumulate(0.5 * (grad + grad.T))

    out_w = _make(w, (a,), backward_w)
    out_u = _make(u, (a,), backward_u)
    return out_w, out_u


# -- graph gather/scatter -----------------------------------------------------


def take0(a, indices):
    """Select rows along axis 0 by integer index (gather)."""
    a = _as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    data = a.data[indices]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, indices, g)
            a._accumulate(full)

    return _make(data, (a,), backward)


def segment_sum(a, segment_ids, num_segments):
    """Sum rows of ``a`` into ``num_segments`` buckets along axis 0 (scatter-add)."""
    a = _as_tensor(a)
    segment_ids = np.asarray(segment_ids, dtype=np.intp)
    data = np.zeros((num_segments,) + a.data.shape[1:], dtype=a.data.dtype)
    np.add.at(data, segment_ids, a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g[segment_ids])

    return _make(data, (a,), backward)
