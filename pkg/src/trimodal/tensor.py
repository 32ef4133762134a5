"""Minimal dense-tensor library with reverse-mode automatic differentiation.

Arrays are numpy-backed. The autodiff is a define-by-run tape over a fixed
op vocabulary: exactly what the trunk, heads and optimizer need, nothing
more. float32 is the training dtype; build graphs in float64 when running
finite-difference verification.

All randomness (dropout masks) flows through an explicit numpy Generator.
"""

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class LabelError(ValueError):
    """A class label is outside the valid range."""


class GraphError(RuntimeError):
    """The autodiff graph was used outside its contract."""


class Tensor:
    """A dense array plus its position in the backward tape.

    `data` is immutable by convention after construction (the optimizer is
    the only sanctioned writer, and only on leaf parameters between graphs).
    `grad` accumulates additively across backward() calls until zeroed.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward_fn=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not Tensors")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward_fn = _backward_fn

    # -- introspection -------------------------------------------------

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
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- backward ------------------------------------------------------

    def backward(self):
        """Accumulate gradients of this scalar into every reachable
        requires_grad tensor. Repeated calls add on top of existing grads."""
        if self.data.size != 1:
            raise GraphError(f"backward() requires a scalar loss, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._backward_fn is None:
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A named trainable leaf.

    `decay_exempt` marks biases, norm scales/shifts and relative-position
    tables, which the optimizer never weight-decays.
    """

    __slots__ = ("name", "decay_exempt")

    def __init__(self, data, name, decay_exempt=False, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.decay_exempt = bool(decay_exempt)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, decay_exempt={self.decay_exempt})"


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------

def add(a, b):
    a = _as_tensor(a, DEFAULT_DTYPE)
    b = _as_tensor(b, a.dtype)
    out_data = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor(out_data, requires_grad=a.requires_grad or b.requires_grad,
                  _parents=(a, b), _backward_fn=bw)


def mul(a, b):
    a = _as_tensor(a, DEFAULT_DTYPE)
    b = _as_tensor(b, a.dtype)
    out_data = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return Tensor(out_data, requires_grad=a.requires_grad or b.requires_grad,
                  _parents=(a, b), _backward_fn=bw)


def matmul(a, b):
    """Batched matrix product [..., m, k] x [..., k, n] -> [..., m, n]."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ga, gb

    return Tensor(out_data, requires_grad=a.requires_grad or b.requires_grad,
                  _parents=(a, b), _backward_fn=bw)


# -- shape manipulation ----------------------------------------------------

def reshape(t, shape):
    shape = tuple(shape)
    out_data = t.data.reshape(shape)
    in_shape = t.data.shape

    def bw(g):
        return (g.reshape(in_shape),)

    return Tensor(out_data, requires_grad=t.requires_grad, _parents=(t,), _backward_fn=bw)


def transpose(t, axes):
    axes = tuple(axes)
    inv = np.argsort(axes)
    out_data = np.transpose(t.data, axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return Tensor(out_data, requires_grad=t.requires_grad, _parents=(t,), _backward_fn=bw)


def concat(tensors, axis):
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out_data, requires_grad=any(t.requires_grad for t in tensors),
                  _parents=tuple(tensors), _backward_fn=bw)


def stack(tensors, axis=0):
    tensors = list(tensors)
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor(out_data, requires_grad=any(t.requires_grad for t in tensors),
                  _parents=tuple(tensors), _backward_fn=bw)


def unstack(t, axis=0):
    """Split one axis into per-index tensors (inverse of stack)."""
    n = t.shape[axis]
    pieces = []
    for i in range(n):
        idx = tuple(slice(None) if a != axis else i for a in range(t.ndim))

        def bw(g, idx=idx):
            full = np.zeros_like(t.data)
            full[idx] = g
            return (full,)

        pieces.append(Tensor(t.data[idx], requires_grad=t.requires_grad,
                             _parents=(t,), _backward_fn=bw))
    return pieces


def split_last(t, sizes):
    """Split the last axis into consecutive chunks of the given sizes."""
    if sum(sizes) != t.shape[-1]:
        raise ShapeError(f"split sizes {sizes} do not cover last extent {t.shape[-1]}")
    offsets = np.cumsum([0] + list(sizes))
    pieces = []
    for i, size in enumerate(sizes):
        lo, hi = offsets[i], offsets[i + 1]

        def bw(g, lo=lo, hi=hi):
            full = np.zeros_like(t.data)
            full[..., lo:hi] = g
            return (full,)

        pieces.append(Tensor(t.data[..., lo:hi], requires_grad=t.requires_grad,
                             _parents=(t,), _backward_fn=bw))
    return tuple(pieces)


def pad(t, pad_width):
    """Zero-pad; pad_width is a numpy-style ((before, after), ...) per axis."""
    pad_width = tuple(tuple(p) for p in pad_width)
    out_data = np.pad(t.data, pad_width)
    slices = tuple(slice(b, b + s) for (b, _), s in zip(pad_width, t.data.shape))

    def bw(g):
        return (g[slices],)

    return Tensor(out_data, requires_grad=t.requires_grad, _parents=(t,), _backward_fn=bw)


def crop(t, slices):
    """Keep a rectangular region; gradient scatters back into zeros."""
    slices = tuple(slices)
    out_data = t.data[slices]

    def bw(g):
        full = np.zeros_like(t.data)
        full[slices] = g
        return (full,)

    return Tensor(out_data, requires_grad=t.requires_grad, _parents=(t,), _backward_fn=bw)


def roll(t, shifts, axes):
    shifts = tuple(shifts)
    axes = tuple(axes)
    out_data = np.roll(t.data, shifts, axis=axes)

    def bw(g):
        return (np.roll(g, tuple(-s for s in shifts), axis=axes),)

    return Tensor(out_data, requires_grad=t.requires_grad, _parents=(t,), _backward_fn=bw)


def take_rows(table, indices):
    """Gather rows of a 2-d table; gradient scatter-adds into the table."""
    indices = np.asarray(indices)
    out_data = table.data[indices]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, indices, g)
        return (full,)

    return Tensor(out_data, requires_grad=table.requires_grad,
                  _parents=(table,), _backward_fn=bw)


# -- reductions ------------------------------------------------------------

def reduce_sum(t, axis=None, keepdims=False):
    out_data = t.data.sum(axis=axis, keepdims=keepdims)
    in_shape = t.data.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, in_shape).copy(),)

    return Tensor(out_data, requires_grad=t.requires_grad, _parents=(t,), _backward_fn=bw)


def reduce_mean(t, axis=None, keepdims=False):
    if axis is None:
        count = t.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([t.data.shape[a] for a in axes]))
    return mul(reduce_sum(t, axis=axis, keepdims=keepdims), 1.0 / count)


# -- nonlinearities ----------------------------------------------------------

def gelu(t):
    """Exact (erf-based) GELU."""
    x = t.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out_data = x * phi

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (phi + x * pdf),)

    return Tensor(out_data.astype(x.dtype, copy=False), requires_grad=t.requires_grad,
                  _parents=(t,), _backward_fn=bw)


def softmax_last(t):
    """Softmax over the last axis; shift-invariant by construction."""
    x = t.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return Tensor(y, requires_grad=t.requires_grad, _parents=(t,), _backward_fn=bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} "
                         f"do not match last extent of {x.shape}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out_data = xhat * gamma.data + beta.data

    def bw(g):
        batch_axes = tuple(range(x.data.ndim - 1))
        dgamma = (g * xhat).sum(axis=batch_axes)
        dbeta = g.sum(axis=batch_axes)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv_std * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return Tensor(out_data.astype(x.dtype, copy=False),
                  requires_grad=x.requires_grad or gamma.requires_grad or beta.requires_grad,
                  _parents=(x, gamma, beta), _backward_fn=bw)


def dropout(t, p, rng, train=True):
    """Inverted dropout. Identity in eval mode or at p == 0."""
    if not train or p == 0.0:
        return t
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    mask = (rng.random(t.shape) >= p).astype(t.dtype) / (1.0 - p)
    return mul(t, Tensor(mask))


def cross_entropy(logits, targets, smoothing=0.0):
    """Mean label-smoothed negative log-likelihood over the batch.

    Smoothed target distribution: (1 - s) on the true class plus s/C uniform.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B, C] logits, got {logits.shape}")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    targets = np.asarray(targets, dtype=np.int64)
    batch, n_classes = logits.shape
    if targets.shape != (batch,):
        raise ShapeError(f"targets shape {targets.shape} does not match batch {batch}")
    bad = np.nonzero((targets < 0) | (targets >= n_classes))[0]
    if bad.size:
        raise LabelError(f"target {targets[bad[0]]} at index {bad[0]} outside [0, {n_classes})")

    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    q = np.full_like(x, smoothing / n_classes)
    q[np.arange(batch), targets] += 1.0 - smoothing
    loss = -(q * logp).sum() / batch

    def bw(g):
        p = np.exp(logp)
        return ((p - q) * (g / batch),)

    return Tensor(np.asarray(loss, dtype=x.dtype), requires_grad=logits.requires_grad,
                  _parents=(logits,), _backward_fn=bw)
