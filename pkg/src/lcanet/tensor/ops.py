"""Differentiable elementwise, linear-algebra, reduction and shape operations."""

from __future__ import annotations

from numbers import Number

import numpy as np

from .core import DimensionError, NumericError, Tensor, as_tensor, make_node


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- binary ops

def add(a, b) -> Tensor:
    if isinstance(b, Number):
        a = as_tensor(a)
        return make_node(a.data + b, (a,), lambda g: (g,), "add")
    if isinstance(a, Number):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_node(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    if isinstance(b, Number):
        a = as_tensor(a)
        return make_node(a.data - b, (a,), lambda g: (g,), "sub")
    if isinstance(a, Number):
        b = as_tensor(b)
        return make_node(a - b.data, (b,), lambda g: (-g,), "sub")
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_node(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub"
    )


def mul(a, b) -> Tensor:
    if isinstance(b, Number):
        return scale(a, b)
    if isinstance(a, Number):
        return scale(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_node(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    if isinstance(b, Number):
        return scale(a, 1.0 / b)
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward, "div")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    """Matrix product; leading axes of ``a`` (and ``b``) are batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if ad.ndim > 2 and bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_node(ad @ bd, (a, b), backward, "matmul")


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` as one node; ``x`` is (..., d_in), ``w`` is (d_in, d_out)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0] or w.ndim != 2:
        raise DimensionError(f"linear: cannot multiply shapes {x.shape} and {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (wd.shape[1],):
            raise DimensionError(f"linear: bias shape {b.shape} does not match {wd.shape}")
        out = out + b.data
        parents.append(b)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ wd.T) if x.requires_grad else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_node(out, parents, backward, "linear")


# ------------------------------------------------------------ pointwise unary

def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return make_node(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,), "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_node(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


_POINTWISE = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "add": add,
    "mul": mul,
    "scale": scale,
}


def pointwise(op: str, *args) -> Tensor:
    """Dispatch by name: sigmoid, tanh, relu (unary); add, mul (binary); scale(x, c)."""
    try:
        fn = _POINTWISE[op]
    except KeyError:
        raise ValueError(f"unknown pointwise op {op!r}") from None
    return fn(*args)


# ----------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ------------------------------------------------------------------ shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return make_node(a.data[index], (a,), backward, "getitem")


def take(a, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis`` with an integer index array (may repeat)."""
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        idx = [slice(None)] * len(shape)
        idx[axis] = indices
        np.add.at(out, tuple(idx), g)
        return (out,)

    return make_node(np.take(a.data, indices, axis=axis), (a,), backward, "take")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    return make_node(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"stack: incompatible shapes {[t.shape for t in tensors]}") from None

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_node(out, tensors, backward, "stack")


# -------------------------------------------------------------------- softmax

def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax; ``mask`` (bool, broadcastable) excludes entries.

    Excluded entries get probability exactly 0 and receive no gradient.
    """
    x = as_tensor(x)
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise NumericError("softmax: non-finite input")
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    shifted = xd - np.max(xd, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return make_node(out, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise NumericError("log_softmax: non-finite input")
    shifted = xd - np.max(xd, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * np.sum(g, axis=axis, keepdims=True),)

    return make_node(out, (x,), backward, "log_softmax")
