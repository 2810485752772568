"""Spatio-temporal convolution, max pooling and batch normalisation primitives.

Layout is channel-first: a single clip is (C, T, H, W) and a batch is
(N, C, T, H, W). Both are accepted; single clips come back unbatched.
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import DimensionError, Tensor, as_tensor, make_node


# above this many im2col entries conv3d loops over kernel offsets instead
_IM2COL_LIMIT = 40_000_000


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


def conv_output_shape(in_dims, kernel, stride, pad) -> tuple[int, int, int]:
    """floor((in + 2p - k) / s) + 1 per axis."""
    out = []
    for n, k, s, p in zip(in_dims, _triple(kernel), _triple(stride), _triple(pad)):
        if s <= 0:
            raise ValueError(f"stride must be positive, got {s}")
        if k > n + 2 * p:
            raise DimensionError(f"kernel extent {k} exceeds padded input extent {n + 2 * p}")
        out.append((n + 2 * p - k) // s + 1)
    return tuple(out)


def pool_output_shape(in_dims, window, stride) -> tuple[int, int, int]:
    """floor((in - w) / s) + 1 per axis."""
    out = []
    for n, w, s in zip(in_dims, _triple(window), _triple(stride)):
        if w <= 0 or s <= 0:
            raise ValueError(f"pool window and stride must be positive, got {w}, {s}")
        if w > n:
            raise DimensionError(f"pool window {w} exceeds input extent {n}")
        out.append((n - w) // s + 1)
    return tuple(out)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 4:
        from .ops import reshape
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 5:
        raise DimensionError(f"expected (C,T,H,W) or (N,C,T,H,W), got shape {x.shape}")
    return x, False


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    if squeeze:
        from .ops import reshape
        return reshape(y, y.shape[1:])
    return y


def conv3d(x, kernels, bias=None, stride=1, pad=0) -> Tensor:
    """Zero-padded 3D cross-correlation.

    ``kernels`` is (C_out, C_in, k_t, k_h, k_w). Small problems go through a
    single im2col matrix product; large ones accumulate one kernel offset at
    a time so memory stays at the size of the output.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    x, squeeze = _batched(x)
    stride, pad = _triple(stride), _triple(pad)
    n, c_in, t, h, w = x.shape
    if kernels.ndim != 5 or kernels.shape[1] != c_in:
        raise DimensionError(f"conv3d: kernel shape {kernels.shape} does not fit input {x.shape}")
    c_out, _, kt, kh, kw = kernels.shape
    to, ho, wo = conv_output_shape((t, h, w), (kt, kh, kw), stride, pad)
    st, sh, sw = stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad[0],) * 2, (pad[1],) * 2, (pad[2],) * 2))
    wd = kernels.data
    offsets = list(itertools.product(range(kt), range(kh), range(kw)))

    def window(i, j, k):
        return (
            slice(None),
            slice(None),
            slice(i, i + st * (to - 1) + 1, st),
            slice(j, j + sh * (ho - 1) + 1, sh),
            slice(k, k + sw * (wo - 1) + 1, sw),
        )

    dtype = np.result_type(x.dtype, kernels.dtype)
    fan = c_in * kt * kh * kw
    rows = n * to * ho * wo
    use_cols = rows * fan <= _IM2COL_LIMIT
    wmat = wd.reshape(c_out, fan)
    if use_cols:
        # (N, C, To, Ho, Wo, kt, kh, kw) -> (N, To, Ho, Wo, C, kt, kh, kw) -> (rows, fan)
        win = sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(rows, fan)
        out = (cols @ wmat.T).reshape(n, to, ho, wo, c_out)
    else:
        cols = None
        out = np.zeros((n, to, ho, wo, c_out), dtype=dtype)
        for i, j, k in offsets:
            # (N, C_in, To, Ho, Wo) x (C_out, C_in) -> (N, To, Ho, Wo, C_out)
            out += np.tensordot(xp[window(i, j, k)], wd[:, :, i, j, k], axes=([1], [1]))
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))
    parents = [x, kernels]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data.reshape(1, c_out, 1, 1, 1)
        parents.append(bias)

    def backward(g):
        gx = gw = None
        if use_cols:
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(rows, c_out)
            if kernels.requires_grad:
                gw = (g2.T @ cols).reshape(wd.shape)
            if x.requires_grad and stride == (1, 1, 1) and all(q < k for q, k in zip(pad, (kt, kh, kw))):
                # unit stride: the input gradient is a full correlation of g with the flipped kernels
                full = [(k - 1 - q,) * 2 for q, k in zip(pad, (kt, kh, kw))]
                gp = np.pad(g, ((0, 0), (0, 0), *full))
                gwin = sliding_window_view(gp, (kt, kh, kw), axis=(2, 3, 4))
                gcols = np.ascontiguousarray(gwin.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(n * t * h * w, -1)
                wflip = np.ascontiguousarray(wd[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)).reshape(c_in, -1)
                gx = np.ascontiguousarray((gcols @ wflip.T).reshape(n, t, h, w, c_in).transpose(0, 4, 1, 2, 3))
            elif x.requires_grad:
                dcols = (g2 @ wmat).reshape(n, to, ho, wo, c_in, kt, kh, kw)
                gxp = np.zeros_like(xp)
                for i, j, k in offsets:
                    gxp[window(i, j, k)] += dcols[..., i, j, k].transpose(0, 4, 1, 2, 3)
                gx = gxp[:, :, pad[0]:pad[0] + t, pad[1]:pad[1] + h, pad[2]:pad[2] + w]
        else:
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for i, j, k in offsets:
                    # (C_out, C_in) x (N, C_out, To, Ho, Wo) -> (C_in, N, To, Ho, Wo)
                    contrib = np.tensordot(wd[:, :, i, j, k], g, axes=([0], [1]))
                    gxp[window(i, j, k)] += contrib.transpose(1, 0, 2, 3, 4)
                gx = gxp[:, :, pad[0]:pad[0] + t, pad[1]:pad[1] + h, pad[2]:pad[2] + w]
            if kernels.requires_grad:
                gw = np.zeros_like(wd)
                for i, j, k in offsets:
                    gw[:, :, i, j, k] = np.tensordot(
                        g, xp[window(i, j, k)], axes=([0, 2, 3, 4], [0, 2, 3, 4])
                    )
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    return _unbatch(make_node(out, parents, backward, "conv3d"), squeeze)


def maxpool3d(x, window, stride=None) -> Tensor:
    """Max pooling; gradient goes to the window argmax, ties to the lowest flat index."""
    x = as_tensor(x)
    x, squeeze = _batched(x)
    window = _triple(window)
    stride = window if stride is None else _triple(stride)
    n, c, t, h, w = x.shape
    to, ho, wo = pool_output_shape((t, h, w), window, stride)
    st, sh, sw = stride
    xd = x.data
    offsets = list(itertools.product(*(range(v) for v in window)))

    def view(i, j, k):
        return (
            slice(None),
            slice(None),
            slice(i, i + st * (to - 1) + 1, st),
            slice(j, j + sh * (ho - 1) + 1, sh),
            slice(k, k + sw * (wo - 1) + 1, sw),
        )

    best = xd[view(*offsets[0])].copy()
    arg = np.zeros(best.shape, dtype=np.int32)
    # offsets enumerate in increasing flat-index order, so strict > keeps the lowest on ties
    for idx, off in enumerate(offsets[1:], start=1):
        cand = xd[view(*off)]
        better = cand > best
        best = np.where(better, cand, best)
        arg[better] = idx

    def backward(g):
        gx = np.zeros_like(xd)
        for idx, off in enumerate(offsets):
            gx[view(*off)] += np.where(arg == idx, g, 0)
        return (gx,)

    return _unbatch(make_node(best, (x,), backward, "maxpool3d"), squeeze)


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.9, eps: float = 1e-5,
               mask: np.ndarray | None = None) -> Tensor:
    """Per-channel normalisation of (N, C, T, H, W) over all non-channel axes.

    ``mask`` (broadcastable to x, 1 = valid) restricts the statistics to real
    frames of padded batches; masked outputs are zero. In training mode the
    running statistics are updated in place:
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    x, squeeze = _batched(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: gamma/beta shape {gamma.shape} for {c} channels")
    xd = x.data
    axes = (0, 2, 3, 4)
    if mask is None:
        m = np.ones((1, 1, 1, 1, 1), dtype=xd.dtype)
        count = xd.size // c
    else:
        m = np.broadcast_to(mask, (xd.shape[0], 1) + xd.shape[2:]).astype(xd.dtype)
        count = int(m.sum())
    shape = (1, c, 1, 1, 1)
    if training:
        mu = (xd * m).sum(axis=axes) / count
        centred = (xd - mu.reshape(shape)) * m
        var = (centred * centred).sum(axis=axes) / count
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
        centred = (xd - mu.reshape(shape)) * m
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = centred * inv_std.reshape(shape)
    gd = gamma.data.reshape(shape)
    out = (gd * xhat + beta.data.reshape(shape)) * m

    def backward(g):
        g = g * m
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gd
        if training:
            gx = (inv_std.reshape(shape) / count) * (
                count * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            ) * m
        else:
            gx = dxhat * inv_std.reshape(shape)
        return gx, dgamma, dbeta

    return _unbatch(make_node(out, (x, gamma, beta), backward, "batch_norm"), squeeze)


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: kept activations are scaled by 1/(1-rate); identity in eval."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")
