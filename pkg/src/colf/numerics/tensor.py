"""Dense float64 tensors with reverse-mode differentiation.

Every operation that touches a tensor requiring gradients records its parents
and a closure mapping the output gradient to parent gradients. ``backward``
orders the recorded nodes topologically and visits each exactly once.
"""
from contextlib import contextmanager

import numpy as np

from .. import kernels

LOG_EPS = 1e-12   # log inputs are clamped to >= this
EXP_MAX = 700.0   # exp inputs are clamped to <= this (float64 overflow at ~709.8)

_grad_enabled = [True]


@contextmanager
def no_grad():
    prev = _grad_enabled[0]
    _grad_enabled[0] = False
    try:
        yield
    finally:
        _grad_enabled[0] = prev


def grad_enabled():
    return _grad_enabled[0]


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    __array_priority__ = 100  # so ndarray <op> Tensor defers to Tensor

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # ------------------------------------------------------------------ basics
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # --------------------------------------------------------------- operators
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
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

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

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    """Wrap a result; attach graph bookkeeping only when some parent needs it."""
    out = Tensor(data)
    out.op = op
    if _grad_enabled[0]:
        live = tuple(p for p in parents if p.requires_grad)
        if live:
            out.requires_grad = True
            out._parents = parents
            out._backward = backward_fn
    return out


def sum_leading(x, n_axes=1):
    """Sum over the first ``n_axes`` axes as a BLAS vector-matrix product.

    Several times faster than ``x.sum(axis=0)`` for tall, narrow arrays.
    """
    lead = int(np.prod(x.shape[:n_axes]))
    return (np.ones(lead) @ x.reshape(lead, -1)).reshape(x.shape[n_axes:])


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = sum_leading(grad, extra)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- arithmetic
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)
    return _make(out, (a, b), bw, "div")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p):
    p = float(p)
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def matmul(a, b):
    """``a @ b`` for 2-D operands, batched 3-D operands, or (..., k) @ (k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb
    return _make(out, (a, b), bw, "matmul")


def linear(x, w, b=None):
    """``x @ w + b`` for x (..., k), w (k, n), b (n,) as a single graph node."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out += b.data
        parents = (x, w, b)
    k, n = wd.shape

    def bw(g):
        g2 = g.reshape(-1, n)
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.reshape(-1, k).T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (sum_leading(g2) if b.requires_grad else None)
    return _make(out, parents, bw, "linear")


# ---------------------------------------------------------------- elementwise
def exp(a):
    out = np.exp(np.minimum(a.data, EXP_MAX))
    mask = a.data <= EXP_MAX
    return _make(out, (a,), lambda g: (g * out * mask,), "exp")


def log(a):
    """Natural log with inputs clamped to ``LOG_EPS`` (zero gradient below it)."""
    ad = a.data
    clipped = np.maximum(ad, LOG_EPS)
    return _make(np.log(clipped), (a,), lambda g: (g / clipped * (ad >= LOG_EPS),), "log")


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def elu(a):
    out, der = kernels.elu_with_grad(a.data)
    return _make(out, (a,), lambda g: (g * der,), "elu")


def sigmoid(a):
    ad = a.data
    # split form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(ad))
    out = np.where(ad >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a):
    ad = a.data
    out = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))

    def bw(g):
        e = np.exp(-np.abs(ad))
        s = np.where(ad >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * s,)
    return _make(out, (a,), bw, "softplus")


def tabs(a):
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def clamp_min(a, lo):
    mask = a.data >= lo
    return _make(np.maximum(a.data, lo), (a,), lambda g: (g * mask,), "clamp_min")


def softmax(a, axis=-1, mask=None):
    """Softmax with max subtraction; entries where ``mask`` is False get probability 0."""
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _make(out, (a,), bw, "softmax")


# ---------------------------------------------------------------- reductions
def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)
    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def cumsum(a, axis=-1, exclusive=False):
    x = a.data
    out = np.cumsum(x, axis=axis)
    if exclusive:
        out = out - x

    def bw(g):
        r = np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)
        if exclusive:
            r = r - g
        return (r,)
    return _make(out, (a,), bw, "cumsum")


# ------------------------------------------------------------------- shaping
def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a, shape):
    old = a.shape
    return _make(np.broadcast_to(a.data, shape), (a,), lambda g: (unbroadcast(g, old),), "broadcast")


def _is_basic(key):
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis for k in items)


def getitem(a, key):
    shape = a.shape
    basic = _is_basic(key)

    def bw(g):
        out = np.zeros(shape)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)
    return _make(a.data[key], (a,), bw, "getitem")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=ax))
    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in tensors]
    return concat(expanded, axis=axis)


def take_rows(a, idx):
    """Gather rows of a 2-D tensor: ``a[idx]`` for an integer index array of any shape."""
    if a.ndim != 2:
        raise ShapeError(f"take_rows: expected a 2-D tensor, got shape {a.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]
    out = a.data[idx]

    def bw(g):
        return (kernels.scatter_add_rows(idx, g.reshape(idx.size, -1), n),)
    return _make(out, (a,), bw, "take_rows")


def leave_one_out_sum(a):
    """out[i] = sum_{j != i} a[j] along axis 0.

    The forward sum runs over the other entries sorted elementwise, so the value
    does not depend on how the inputs are ordered.
    """
    if a.shape[0] == 0:
        raise ShapeError("leave_one_out_sum: empty input")
    out = kernels.loo_sorted_sum0(a.data)

    def bw(g):
        return (g.sum(axis=0, keepdims=True) - g,)
    return _make(out, (a,), bw, "leave_one_out_sum")


def view_mean(a):
    """Mean over axis 0 that is exactly invariant to reordering along that axis."""
    n = a.shape[0]
    out = kernels.sorted_sum0(a.data) / n if n > 1 else a.data[0].copy()
    return _make(out, (a,), lambda g: (np.broadcast_to(g / n, a.shape),), "view_mean")


# ----------------------------------------------------------------- sampling
def sample_bilinear(grid, xy):
    """Bilinear lookup of an (H, W, C) tensor at constant (P, 2) coordinates."""
    h, w, _ = grid.shape
    xy = np.asarray(xy, dtype=np.float64)
    out = kernels.bilinear_gather(grid.data, xy)
    return _make(out, (grid,), lambda g: (kernels.bilinear_scatter(g, xy, h, w),), "bilinear")


# ----------------------------------------------------------------- backward
def topo_order(root):
    """Nodes reachable from ``root`` that require grad, inputs before outputs."""
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones(loss.shape)}
    for node in reversed(topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
