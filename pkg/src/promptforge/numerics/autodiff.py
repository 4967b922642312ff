"""Small reverse-mode autodiff over numpy arrays.

Define-by-run: every op evaluates eagerly and, when any input requires a
gradient, records a closure that maps the output gradient to input
gradients. ``backward`` walks the recorded tape in reverse topological
order and accumulates into ``.grad`` of trainable leaves only.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels as K

_DTYPES = {"float64": np.float64, "float32": np.float32}


def default_dtype():
    """Float dtype for new tensors; ``PROMPTFORGE_DTYPE=float32`` for fast runs."""
    return _DTYPES[os.environ.get("PROMPTFORGE_DTYPE", "float64")]


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shapes."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class Tensor:
    """Array value plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(default_dtype())
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else None

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return detach(self)

    def __repr__(self):
        flag = ", trainable" if self.requires_grad and self.op == "leaf" else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(self, axes)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=default_dtype()))


def parameter(data, name=None):
    """Trainable leaf."""
    return Tensor(np.array(data, dtype=default_dtype()), requires_grad=True, name=name)


def _make(data, parents, backward, op):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ----------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def scale(a, c):
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a):
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def _rows(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def gelu(a):
    x2 = _rows(a.data)
    out = K.gelu_fwd(x2).reshape(a.shape)
    return _make(out, (a,), lambda g: (K.gelu_bwd(x2, _rows(g)).reshape(g.shape),), "gelu")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    ad = a.data
    if np.any(ad <= 0):
        raise ValueError("log: non-positive input")
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def absolute(a):
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


# ------------------------------------------------------------------ reductions


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return _make(ad @ bd, (a, b), bw, "matmul")


def transpose(a, axes=None):
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape):
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", *(t.shape for t in tensors))
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw, "concat")


def _is_basic(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def take(a, idx):
    """Slicing / fancy indexing; repeated indices accumulate in backward."""
    shape = a.shape
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    try:
        out = a.data[idx]
    except IndexError:
        raise ShapeError("slice", shape, idx) from None
    if basic:
        out = out.copy()
    return _make(out, (a,), bw, "slice")


# -------------------------------------------------------------------- row-wise


def layernorm(a, eps=1e-5):
    """Normalize over the last axis without affine parameters."""
    xhat, rstd = K.layernorm_fwd(_rows(a.data), eps)
    return _make(
        xhat.reshape(a.shape),
        (a,),
        lambda g: (K.layernorm_bwd(_rows(g), xhat, rstd).reshape(g.shape),),
        "layernorm",
    )


def softmax(a):
    """Max-subtracted softmax over the last axis."""
    y = K.softmax_fwd(_rows(a.data))
    return _make(
        y.reshape(a.shape), (a,), lambda g: (K.softmax_bwd(y, _rows(g)).reshape(g.shape),), "softmax"
    )


def log_softmax(a):
    y = K.log_softmax_fwd(_rows(a.data))
    return _make(
        y.reshape(a.shape),
        (a,),
        lambda g: (K.log_softmax_bwd(y, _rows(g)).reshape(g.shape),),
        "log_softmax",
    )


def l2_normalize(a, eps=1e-12):
    """x / max(||x||, eps) along the last axis."""
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    floored = norm <= eps
    denom = np.where(floored, eps, norm)
    y = a.data / denom

    def bw(g):
        proj = np.where(floored, 0.0, (g * y).sum(axis=-1, keepdims=True))
        return ((g - y * proj) / denom,)

    return _make(y, (a,), bw, "l2_normalize")


def cosine_similarity(a, b):
    """Pairwise cosine matrix between rows of ``a`` and rows of ``b``."""
    return matmul(l2_normalize(a), transpose(l2_normalize(b)))


def arc_margin(cos, margin):
    """cos(theta + margin) with the standard fallback once theta + margin > pi.

    Inputs are clipped to [-1, 1]. Past the threshold the value continues
    as ``cos - margin * sin(margin)`` so it stays monotone in theta.
    """
    c = np.clip(cos.data, -1.0, 1.0)
    cm, sm = np.cos(margin), np.sin(margin)
    th = np.cos(np.pi - margin)
    mm = np.sin(np.pi - margin) * margin
    sin = np.sqrt(np.maximum(1.0 - c * c, 0.0))
    main = c > th
    out = np.where(main, c * cm - sin * sm, c - mm)

    def bw(g):
        safe = np.maximum(sin, 1e-12)
        d = np.where(main, cm + sm * c / safe, 1.0)
        return (g * d,)

    return _make(out, (cos,), bw, "arc_margin")


def detach(a):
    out = Tensor(a.data)
    out.op = "detach"
    return out


# --------------------------------------------------------------------- backward


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every trainable leaf.

    Returns the list of leaves that received a gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return []
    grads = {id(loss): np.ones_like(loss.data)}
    touched = []
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            touched.append(node)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return touched


def zero_grad(params):
    for p in params:
        p.grad = None
