"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op computes its forward value eagerly with numpy and records a pullback
closure on the output node.  ``backward`` replays the recorded graph in reverse
topological order (the tape) and accumulates gradients into leaves.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64
LEAKY_SLOPE = 0.01


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_pullback", "name")

    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._pullback = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._pullback is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(value, parents, pullback):
    """Wrap ``value`` as the output of a differentiable op.

    ``pullback(g)`` must return one gradient (or None) per parent.  When no
    parent requires a gradient the result is a plain constant.
    """
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._pullback = pullback
    return out


def unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def pullback(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(a.data * b.data, (a, b), pullback)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    value = a.data / b.data

    def pullback(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * value / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(value, (a, b), pullback)


def neg(a):
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    """Elementwise ``a ** exponent`` for a constant real exponent."""
    a = as_tensor(a)
    p = float(exponent)
    value = a.data**p
    return make_op(value, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a):
    a = as_tensor(a)
    value = np.exp(a.data)
    return make_op(value, (a,), lambda g: (g * value,))


def log(a):
    a = as_tensor(a)
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    value = np.sqrt(a.data)
    return make_op(value, (a,), lambda g: (g * 0.5 / value,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return make_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a, slope=LEAKY_SLOPE):
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return make_op(a.data * factor, (a,), lambda g: (g * factor,))


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(a):
    a = as_tensor(a)
    value = _sigmoid(np.atleast_1d(a.data)).reshape(a.shape)
    return make_op(value, (a,), lambda g: (g * value * (1.0 - value),))


def softplus(a):
    a = as_tensor(a)
    value = _softplus(a.data)
    return make_op(value, (a,), lambda g: (g * _sigmoid(np.atleast_1d(a.data)).reshape(a.shape),))


def where(cond, a, b):
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a constant mask."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return make_op(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (
            unbroadcast(np.where(cond, g, 0.0), a.shape),
            unbroadcast(np.where(cond, 0.0, g), b.shape),
        ),
    )


# ------------------------------------------------------------ linear algebra


def _swap(x):
    return np.swapaxes(x, -1, -2)


def matmul(a, b):
    """Batched matrix product with numpy broadcasting; both operands >= 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def pullback(g):
        ga = unbroadcast(g @ _swap(b.data), a.shape) if a.requires_grad else None
        gb = unbroadcast(_swap(a.data) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(a.data @ b.data, (a, b), pullback)


def sparse_dense_matmul(S, x):
    """Left-multiply every batch item of ``x`` (..., n, d) by a constant sparse (m, n)."""
    x = as_tensor(x)
    S = sp.csr_matrix(S)
    if x.ndim < 2 or x.shape[-2] != S.shape[1]:
        raise ValueError(f"sparse matmul shape mismatch: {S.shape} @ {x.shape}")
    lead = x.shape[:-2]
    n, d = x.shape[-2:]
    flat = np.moveaxis(x.data.reshape(-1, n, d), 1, 0).reshape(n, -1)
    value = np.moveaxis((S @ flat).reshape(S.shape[0], -1, d), 0, 1).reshape(*lead, S.shape[0], d)
    St = S.T.tocsr()

    def pullback(g):
        gf = np.moveaxis(g.reshape(-1, S.shape[0], d), 1, 0).reshape(S.shape[0], -1)
        gx = np.moveaxis((St @ gf).reshape(n, -1, d), 0, 1).reshape(x.shape)
        return (gx,)

    return make_op(value, (x,), pullback)


# ---------------------------------------------------------------- structural


def reshape(a, shape):
    a = as_tensor(a)
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inverse = np.argsort(axes)
    return make_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def slice_(a, index):
    a = as_tensor(a)

    def pullback(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        if _has_array_index(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_op(a.data[index], (a,), pullback)


def _has_array_index(index):
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    value = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def pullback(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return make_op(value, tensors, pullback)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in tensors]
    return concat(expanded, axis=axis)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    value = a.data.sum(axis=axis, keepdims=keepdims)

    def pullback(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op(value, (a,), pullback)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return sum_(a, axis, keepdims) * (1.0 / count)


def gather(a, indices, axis=0):
    """``np.take(a, indices, axis)`` with a constant integer index array."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)

    def pullback(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (full,)

    return make_op(np.take(a.data, indices, axis=axis), (a,), pullback)


def scatter_add(values, indices, size, axis=0):
    """Sum slices of ``values`` into ``size`` buckets along ``axis`` by ``indices``."""
    values = as_tensor(values)
    indices = np.asarray(indices, dtype=np.int64)
    shape = list(values.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=DTYPE)
    np.add.at(np.moveaxis(out, axis, 0), indices, np.moveaxis(values.data, axis, 0))
    return make_op(out, (values,), lambda g: (np.take(g, indices, axis=axis),))


# ------------------------------------------------------------------- layers


def _conv_windows(xp, k, stride, ho, wo):
    for ky in range(k):
        for kx in range(k):
            yield ky, kx, xp[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride, :]


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D convolution over NHWC input with a (k, k, Cin, Cout) kernel."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    k = w.shape[0]
    n, h, wd, cin = x.shape
    cout = w.shape[3]
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    cols = np.stack([win for _, _, win in _conv_windows(xp, k, stride, ho, wo)], axis=3)
    cols = cols.reshape(n, ho, wo, k * k * cin)
    wmat = w.data.reshape(k * k * cin, cout)
    value = cols @ wmat
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        value = value + b.data
        parents = (x, w, b)

    def pullback(g):
        gw = (cols.reshape(-1, k * k * cin).T @ g.reshape(-1, cout)).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g @ wmat.T).reshape(n, ho, wo, k * k, cin)
            gxp = np.zeros_like(xp)
            for idx, (ky, kx, _) in enumerate(_conv_windows(gxp, k, stride, ho, wo)):
                gxp[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride, :] += gcols[:, :, :, idx, :]
            gx = gxp[:, padding : padding + h, padding : padding + wd, :]
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, cout).sum(axis=0)

    return make_op(value, parents, pullback)


def group_norm_stats(x, groups, eps=1e-5):
    """Standardize channels-last ``x`` (N, ..., C) within each (sample, group).

    Mean and variance pool every non-batch position and the C/groups channels of
    a group.  No affine transform is applied here.
    """
    x = as_tensor(x)
    n, c = x.shape[0], x.shape[-1]
    if c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    xg = x.data.reshape(n, -1, groups, c // groups)
    mu = xg.mean(axis=(1, 3), keepdims=True)
    centered = xg - mu
    var = (centered**2).mean(axis=(1, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def pullback(g):
        gg = g.reshape(xg.shape)
        term = gg.mean(axis=(1, 3), keepdims=True)
        proj = (gg * xhat).mean(axis=(1, 3), keepdims=True)
        return ((inv * (gg - term - xhat * proj)).reshape(x.shape),)

    return make_op(xhat.reshape(x.shape), (x,), pullback)


# ----------------------------------------------------------------- backward


def topological_order(root):
    """Nodes reachable from ``root`` that carry gradients, parents first."""
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(loss, accumulate=False):
    """Back-propagate a scalar ``loss``; return ``{leaf: gradient}``.

    Leaf ``.grad`` attributes are set (or added to, when ``accumulate``).
    Leaves that do not require gradients never appear in the result.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    tape = topological_order(loss)
    grads = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    leaves = {}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._pullback(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for leaf, g in leaves.items():
        leaf.grad = leaf.grad + g if (accumulate and leaf.grad is not None) else g
    return leaves


def gradcheck(fn, point, epsilon=1e-6, indices=None):
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` maps a list of Tensors to a scalar Tensor; ``point`` is one array or a
    list of arrays.  ``indices`` optionally restricts the check to a list of
    ``(input_number, flat_index)`` coordinates.
    """
    arrays = [np.array(point, dtype=DTYPE)] if not isinstance(point, (list, tuple)) else [
        np.array(p, dtype=DTYPE) for p in point
    ]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    grads = backward(fn(leaves))
    analytic = [grads.get(leaf, np.zeros(leaf.shape)) for leaf in leaves]

    def evaluate(k, flat, delta):
        shifted = [a.copy() for a in arrays]
        shifted[k].reshape(-1)[flat] += delta
        return fn([Tensor(s) for s in shifted]).item()

    if indices is None:
        indices = [(k, i) for k, a in enumerate(arrays) for i in range(a.size)]
    worst = 0.0
    for k, i in indices:
        numeric = (evaluate(k, i, epsilon) - evaluate(k, i, -epsilon)) / (2.0 * epsilon)
        a = analytic[k].reshape(-1)[i]
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst
